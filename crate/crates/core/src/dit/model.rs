//! The expert transformer.
//!
//! Per block, with `m` the token's modality expert:
//! ```text
//! h   = x + gate1_m ⊙ Attn(LN(x)·(1 + scale1_m) + shift1_m)
//! out = h + gate2_m ⊙ MLP(LN(h)·(1 + scale2_m) + shift2_m)
//! ```
//! The six modulation vectors come from `Linear(SiLU(t_emb))`; their gate
//! columns start at zero, so every block is the identity at initialization.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::config::{DitConfig, PosMode};
use super::patch::{num_tokens, patchify, token_grid, unpatch_gather_index};
use super::rope::{sinusoidal_pos, timestep_embedding, RopeTable};
use super::sequence::{row_mask, validate_row, DitExample, Modality, Source, Token};
use crate::error::{Error, Result};
use crate::numerics::layers::Linear;
use crate::numerics::{
    AttnMask, Graph, ParamBuilder, ParamId, ParamStore, Rng, Scalar, Tensor, Var, GATHER_ZERO,
};

/// Modulation head `d → 6d` laid out `[shift1, scale1, gate1, shift2, scale2, gate2]`.
fn modulation_head(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Linear {
    let mut s = pb.sub(name);
    let mut w = s.rng().normal_tensor::<f32>(&[d, 6 * d], 1.0 / (d as f64).sqrt());
    for row in w.data_mut().chunks_exact_mut(6 * d) {
        row[2 * d..3 * d].fill(0.0);
        row[5 * d..6 * d].fill(0.0);
    }
    Linear {
        weight: s.tensor("weight", w),
        bias: Some(s.zeros("bias", &[6 * d])),
        d_in: d,
        d_out: 6 * d,
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, hidden: usize) -> Self {
        let mut s = pb.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", d, hidden, 1.0),
            fc2: Linear::new(&mut s, "fc2", hidden, d, 1.0),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }

    fn numel(&self) -> usize {
        self.fc1.numel() + self.fc2.numel()
    }
}

#[derive(Clone, Debug)]
struct Block {
    mod_vision: Linear,
    mod_text: Option<Linear>,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    mlp: Mlp,
    mlp_text: Option<Mlp>,
}

impl Block {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &DitConfig) -> Self {
        let d = cfg.d_model;
        Self {
            mod_vision: modulation_head(pb, "mod_vision", d),
            mod_text: cfg.expert_adaln.then(|| modulation_head(pb, "mod_text", d)),
            q: Linear::new(pb, "q", d, d, 1.0),
            k: {
                // no bias: softmax is invariant to a per-query constant logit
                let mut s = pb.sub("k");
                Linear {
                    weight: s.normal("weight", &[d, d], d, 1.0),
                    bias: None,
                    d_in: d,
                    d_out: d,
                }
            },
            v: Linear::new(pb, "v", d, d, 1.0),
            proj: Linear::new(pb, "proj", d, d, 1.0),
            mlp: Mlp::new(pb, "mlp", d, d * cfg.mlp_ratio),
            mlp_text: cfg
                .expert_mlp
                .then(|| Mlp::new(pb, "mlp_text", d, d * cfg.mlp_ratio)),
        }
    }
}

/// Per-row constants shared by every block.
struct RowPlan<F> {
    /// Gathers `(L, 6d)` token modulation rows out of `(2E, 6d)`.
    mod_index: Rc<Vec<u32>>,
    /// Gathers `(L, 2d)` final modulation rows out of `(E, 2d)`.
    final_index: Rc<Vec<u32>>,
    rope: Option<(Rc<Vec<F>>, Rc<Vec<F>>)>,
    /// `(vision, text)` selectors for the expert MLP.
    mlp_masks: Option<(Tensor<F>, Tensor<F>)>,
    mask: Rc<AttnMask>,
}

/// Output of [`Dit::forward_row`].
#[derive(Clone, Copy, Debug)]
pub struct RowOut {
    /// Head output `(L, p²·C)` for every slot of the row.
    pub out: Var,
    /// Residual stream entering the first block, `(L, d)`.
    pub hidden_in: Var,
    /// Residual stream leaving the last block, `(L, d)`.
    pub hidden_out: Var,
}

/// Parameter handles of the expert transformer.
#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    text_embed: ParamId,
    patch_embed: Linear,
    pos_tables: Option<[ParamId; 3]>,
    /// Per-channel gain on the sinusoidal embedding.
    pos_gain: Option<ParamId>,
    time1: Linear,
    time2: Linear,
    final_mod: Linear,
    head: Linear,
    blocks: Vec<Block>,
}

impl Dit {
    /// Builds a model and its seeded parameters. Everything outside the
    /// blocks is allocated first, so models differing only in depth share
    /// those weights.
    pub fn new(cfg: DitConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut ps = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x6469_7400);
        let mut pb = ParamBuilder::new(&mut ps, &mut rng);
        let text_embed = pb.normal("text_embed", &[cfg.vocab, d], 1, 1.0);
        let patch_embed = Linear::new(&mut pb, "patch_embed", cfg.patch_in(), d, 1.0);
        let time1 = Linear::new(&mut pb, "time.fc1", cfg.time_embed_dim, d, 1.0);
        let time2 = Linear::new(&mut pb, "time.fc2", d, d, 1.0);
        let final_mod = {
            let mut s = pb.sub("final_mod");
            Linear {
                weight: s.normal("weight", &[d, 2 * d], d, 1.0),
                bias: Some(s.zeros("bias", &[2 * d])),
                d_in: d,
                d_out: 2 * d,
            }
        };
        let head = Linear::new(&mut pb, "head", d, cfg.patch_out(), 1.0);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(Block::new(&mut pb.sub(&format!("blocks.{i}")), &cfg));
        }
        // Absolute-position parameters start at zero so that every position
        // mode computes the same function at initialization.
        let pos_tables = (cfg.pos_mode == PosMode::RopePlusLearned).then(|| {
            let mut s = pb.sub("pos");
            let [et, ey, ex] = cfg.pos_extent;
            [s.zeros("t", &[et, d]), s.zeros("y", &[ey, d]), s.zeros("x", &[ex, d])]
        });
        let pos_gain = (cfg.pos_mode == PosMode::Sinusoidal).then(|| pb.sub("pos").zeros("gain", &[d]));
        let dit = Self {
            cfg,
            text_embed,
            patch_embed,
            pos_tables,
            pos_gain,
            time1,
            time2,
            final_mod,
            head,
            blocks,
        };
        Ok((dit, ps))
    }

    /// Parameters of one modulation head (`d → 6d`).
    pub fn modulation_head_params(&self) -> usize {
        6 * self.cfg.d_model * (self.cfg.d_model + 1)
    }

    /// Parameters of one MLP.
    pub fn mlp_params(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.mlp.numel())
    }

    /// Modulation-head parameters summed over all blocks.
    pub fn modulation_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.mod_vision.numel() + b.mod_text.as_ref().map_or(0, Linear::numel))
            .sum()
    }

    /// Attention and MLP parameters summed over all blocks.
    pub fn attention_mlp_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                b.q.numel()
                    + b.k.numel()
                    + b.v.numel()
                    + b.proj.numel()
                    + b.mlp.numel()
                    + b.mlp_text.as_ref().map_or(0, Mlp::numel)
            })
            .sum()
    }

    pub fn rope_table(&self) -> Result<RopeTable> {
        Ok(RopeTable::new(self.cfg.head_dim(), self.cfg.rope_base)?.with_coord_scale(self.cfg.rope_coord_scale))
    }

    fn check_example<F: Scalar>(&self, ex: &DitExample<F>) -> Result<()> {
        let s = ex.latent.shape();
        if s.len() != 4 || s[3] != self.cfg.in_channels() {
            return Err(Error::shape(format!(
                "latent {s:?} does not have {} input channels",
                self.cfg.in_channels()
            )));
        }
        token_grid(s, self.cfg.patch)?;
        if let Some(&t) = ex.text.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::invalid(format!("text token {t} outside vocabulary")));
        }
        if !ex.timestep.is_finite() {
            return Err(Error::invalid("non-finite timestep"));
        }
        Ok(())
    }

    fn plan<F: Scalar>(&self, row: &[Option<Token>], examples: &[DitExample<F>], mask: Option<Rc<AttnMask>>) -> Result<RowPlan<F>> {
        let (l, d, e) = (row.len(), self.cfg.d_model, examples.len());
        let mask = match mask {
            Some(m) if m.len() == l => m,
            Some(m) => {
                return Err(Error::shape(format!("mask of length {} for row of {l}", m.len())));
            }
            None => Rc::new(row_mask(row)),
        };
        let expand = |rows: &mut Vec<u32>, src: Option<usize>, w: usize| match src {
            Some(r) => rows.extend((r * w) as u32..((r + 1) * w) as u32),
            None => rows.extend(std::iter::repeat_n(GATHER_ZERO, w)),
        };
        let mut mod_index = Vec::with_capacity(l * 6 * d);
        let mut final_index = Vec::with_capacity(l * 2 * d);
        for t in row {
            let src = t.map(|t| match t.modality {
                Modality::Vision => t.example,
                Modality::Text => e + t.example,
            });
            expand(&mut mod_index, src, 6 * d);
            expand(&mut final_index, t.map(|t| t.example), 2 * d);
        }
        let coords: Vec<Option<[usize; 3]>> = row.iter().map(|t| t.and_then(|t| t.coords())).collect();
        let rope = if self.cfg.pos_mode.uses_rope() {
            let [et, ey, ex] = self.cfg.pos_extent;
            if coords.iter().flatten().any(|&[t, y, x]| t >= et || y >= ey || x >= ex) {
                log::debug!("rotary coordinates beyond nominal extent {:?}: extrapolating", self.cfg.pos_extent);
            }
            let (cos, sin) = self.rope_table()?.tables::<F>(&coords);
            Some((Rc::new(cos), Rc::new(sin)))
        } else {
            None
        };
        let mlp_masks = self.cfg.expert_mlp.then(|| {
            let sel = |m: Modality| -> Tensor<F> {
                let mut data = Vec::with_capacity(l * d);
                for t in row {
                    let on = t.is_some_and(|t| t.modality == m);
                    data.extend(std::iter::repeat_n(if on { F::one() } else { F::zero() }, d));
                }
                Tensor::new(&[l, d], data).expect("sized by construction")
            };
            (sel(Modality::Vision), sel(Modality::Text))
        });
        Ok(RowPlan {
            mod_index: Rc::new(mod_index),
            final_index: Rc::new(final_index),
            rope,
            mlp_masks,
            mask,
        })
    }

    /// Token embeddings `(L, d)` with absolute positions when configured.
    fn embed<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, row: &[Option<Token>], examples: &[DitExample<F>]) -> Result<Var> {
        let (p, d) = (self.cfg.patch, self.cfg.d_model);
        // Only examples present in the row are patchified.
        let mut vis_offset = BTreeMap::new();
        let mut patches = Vec::new();
        let mut n_vis = 0usize;
        for t in row.iter().flatten() {
            if matches!(t.source, Source::Vision { .. }) {
                if let std::collections::btree_map::Entry::Vacant(v) = vis_offset.entry(t.example) {
                    v.insert(n_vis);
                    let pt = patchify(&examples[t.example].latent, p)?;
                    n_vis += pt.shape()[0];
                    patches.push(pt);
                }
            }
        }
        let mut text_ids = Vec::new();
        let mut index = Vec::with_capacity(row.len() * d);
        for t in row {
            let Some(t) = t else {
                index.extend(std::iter::repeat_n(GATHER_ZERO, d));
                continue;
            };
            let r = match t.source {
                Source::Vision { index, .. } => vis_offset[&t.example] + index,
                Source::Text(j) => {
                    text_ids.push(examples[t.example].text[j] as usize);
                    n_vis + text_ids.len() - 1
                }
            };
            index.extend((r * d) as u32..((r + 1) * d) as u32);
        }
        let mut parts = Vec::new();
        if !patches.is_empty() {
            let refs: Vec<&Tensor<F>> = patches.iter().collect();
            let pt = g.constant(Tensor::concat_outer(&refs)?);
            parts.push(self.patch_embed.forward(g, ps, pt)?);
        }
        if !text_ids.is_empty() {
            let table = g.param(ps, self.text_embed);
            parts.push(g.select_rows(table, &text_ids)?);
        }
        if parts.is_empty() {
            return Err(Error::invalid("row holds no tokens"));
        }
        let all = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        let mut x = g.gather(all, Rc::new(index), &[row.len(), d])?;

        match self.cfg.pos_mode {
            PosMode::Rope => {}
            PosMode::Sinusoidal => {
                let coords: Vec<Option<[usize; 3]>> = row.iter().map(|t| t.and_then(|t| t.coords())).collect();
                let mut grids = Vec::with_capacity(row.len());
                for t in row {
                    let hw = match t {
                        Some(t) => {
                            let [_, gh, gw] = token_grid(examples[t.example].latent.shape(), p)?;
                            (gh, gw)
                        }
                        None => (0, 0),
                    };
                    grids.push(hw);
                }
                let pe = g.constant(sinusoidal_pos::<F>(&coords, &grids, d));
                let gain = g.param(ps, self.pos_gain.expect("allocated for this mode"));
                let pe = g.mul_bias(pe, gain)?;
                x = g.add(x, pe)?;
            }
            PosMode::RopePlusLearned => {
                let tables = self.pos_tables.expect("allocated for this mode");
                for (axis, id) in tables.into_iter().enumerate() {
                    let extent = self.cfg.pos_extent[axis];
                    let mut idx = Vec::with_capacity(row.len() * d);
                    for t in row {
                        match t.and_then(|t| t.coords()) {
                            Some(c) => {
                                let v = c[axis];
                                if v >= extent {
                                    return Err(Error::invalid(format!(
                                        "coordinate {v} beyond learned position extent {extent}"
                                    )));
                                }
                                idx.extend((v * d) as u32..((v + 1) * d) as u32);
                            }
                            None => idx.extend(std::iter::repeat_n(GATHER_ZERO, d)),
                        }
                    }
                    let table = g.param(ps, id);
                    let pe = g.gather(table, Rc::new(idx), &[row.len(), d])?;
                    x = g.add(x, pe)?;
                }
            }
        }
        Ok(x)
    }

    /// `SiLU(t_emb)` for every example, `(E, d)`.
    fn time_condition<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, examples: &[DitExample<F>]) -> Result<Var> {
        let dim = self.cfg.time_embed_dim;
        let mut data = Vec::with_capacity(examples.len() * dim);
        for ex in examples {
            data.extend(timestep_embedding(ex.timestep, dim).into_iter().map(F::of));
        }
        let te = g.constant(Tensor::new(&[examples.len(), dim], data)?);
        let h = self.time1.forward(g, ps, te)?;
        let h = g.silu(h);
        let temb = self.time2.forward(g, ps, h)?;
        Ok(g.silu(temb))
    }

    fn modulate<F: Scalar>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let s1 = g.add_scalar(scale, 1.0);
        let m = g.mul(n, s1)?;
        g.add(m, shift)
    }

    fn rotated_qk<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, b: &Block, h: Var, plan: &RowPlan<F>) -> Result<(Var, Var)> {
        let mut q = b.q.forward(g, ps, h)?;
        let mut k = b.k.forward(g, ps, h)?;
        if let Some((cos, sin)) = &plan.rope {
            q = g.rope(q, cos.clone(), sin.clone(), self.cfg.heads)?;
            k = g.rope(k, cos.clone(), sin.clone(), self.cfg.heads)?;
        }
        Ok((q, k))
    }

    /// Pre-softmax attention logits `(heads, L, L)` of the first block for
    /// one unpadded example, with the row they refer to.
    pub fn first_block_logits(&self, ps: &ParamStore<f32>, ex: &DitExample<f32>) -> Result<(Vec<Option<Token>>, Tensor<f64>)> {
        let b = self.blocks.first().ok_or_else(|| Error::invalid("model has no blocks"))?;
        self.check_example(ex)?;
        let row = super::sequence::single_row(ex, self.cfg.patch)?;
        let examples = std::slice::from_ref(ex);
        let plan = self.plan(&row, examples, None)?;
        let (l, d, heads) = (row.len(), self.cfg.d_model, self.cfg.heads);
        let mut g = Graph::new();
        let x = self.embed(&mut g, ps, &row, examples)?;
        let c = self.time_condition(&mut g, ps, examples)?;
        let mv = b.mod_vision.forward(&mut g, ps, c)?;
        let mt = match &b.mod_text {
            Some(m) => m.forward(&mut g, ps, c)?,
            None => mv,
        };
        let table = g.concat(&[mv, mt], 0)?;
        let m = g.gather(table, plan.mod_index.clone(), &[l, 6 * d])?;
        let shift1 = g.slice_last(m, 0, d)?;
        let scale1 = g.slice_last(m, d, 2 * d)?;
        let h = Self::modulate(&mut g, x, shift1, scale1)?;
        let (q, k) = self.rotated_qk(&mut g, ps, b, h, &plan)?;
        let (q, k) = (g.value(q).data(), g.value(k).data());
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Vec::with_capacity(heads * l * l);
        for hd in 0..heads {
            for i in 0..l {
                for j in 0..l {
                    let qi = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                    let kj = &k[j * d + hd * dh..j * d + (hd + 1) * dh];
                    out.push(qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * inv);
                }
            }
        }
        Ok((row, Tensor::new(&[heads, l, l], out)?))
    }

    fn block_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        b: &Block,
        x: Var,
        c: Var,
        plan: &RowPlan<F>,
    ) -> Result<Var> {
        let (l, d) = (g.shape(x)[0], self.cfg.d_model);
        let mv = b.mod_vision.forward(g, ps, c)?;
        let mt = match &b.mod_text {
            Some(m) => m.forward(g, ps, c)?,
            None => mv,
        };
        let table = g.concat(&[mv, mt], 0)?;
        let m = g.gather(table, plan.mod_index.clone(), &[l, 6 * d])?;
        let mut chunk = |i: usize| g.slice_last(m, i * d, (i + 1) * d);
        let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = Self::modulate(g, x, shift1, scale1)?;
        let (q, k) = self.rotated_qk(g, ps, b, h, plan)?;
        let v = b.v.forward(g, ps, h)?;
        let a = g.attention(q, k, v, self.cfg.heads, plan.mask.clone())?;
        let a = b.proj.forward(g, ps, a)?;
        let a = g.mul(gate1, a)?;
        let x = g.add(x, a)?;

        let h = Self::modulate(g, x, shift2, scale2)?;
        let mut f = b.mlp.forward(g, ps, h)?;
        if let (Some(mlp_t), Some((sel_v, sel_t))) = (&b.mlp_text, &plan.mlp_masks) {
            let ft = mlp_t.forward(g, ps, h)?;
            let (sv, st) = (g.constant(sel_v.clone()), g.constant(sel_t.clone()));
            let fv = g.mul(f, sv)?;
            let ft = g.mul(ft, st)?;
            f = g.add(fv, ft)?;
        }
        let f = g.mul(gate2, f)?;
        g.add(x, f)
    }

    /// Runs one sequence row. `row[i]` is the token in slot `i` (`None` for
    /// padding); `examples` holds everything the tokens refer to. Without an
    /// explicit mask, tokens attend within their own example only.
    pub fn forward_row<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        row: &[Option<Token>],
        examples: &[DitExample<F>],
        mask: Option<Rc<AttnMask>>,
    ) -> Result<RowOut> {
        if row.is_empty() || examples.is_empty() {
            return Err(Error::invalid("empty row"));
        }
        for ex in examples {
            self.check_example(ex)?;
        }
        validate_row(row, examples, self.cfg.patch)?;
        let plan = self.plan(row, examples, mask)?;
        let d = self.cfg.d_model;
        let l = row.len();

        let hidden_in = self.embed(g, ps, row, examples)?;
        let c = self.time_condition(g, ps, examples)?;
        let mut x = hidden_in;
        for (i, b) in self.blocks.iter().enumerate() {
            x = self.block_forward(g, ps, b, x, c, &plan)?;
            if !g.value(x).all_finite() {
                return Err(Error::non_finite(format!("dit block {i}")));
            }
        }
        let fm = self.final_mod.forward(g, ps, c)?;
        let fm = g.gather(fm, plan.final_index.clone(), &[l, 2 * d])?;
        let shift = g.slice_last(fm, 0, d)?;
        let scale = g.slice_last(fm, d, 2 * d)?;
        let h = Self::modulate(g, x, shift, scale)?;
        let out = self.head.forward(g, ps, h)?;
        if !g.value(out).all_finite() {
            return Err(Error::non_finite("dit output head"));
        }
        Ok(RowOut {
            out,
            hidden_in,
            hidden_out: x,
        })
    }

    /// Reassembles example `e`'s vision outputs from a row into latent
    /// layout `(T', H', W', C)`.
    pub fn predict<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        out: Var,
        row: &[Option<Token>],
        examples: &[DitExample<F>],
        e: usize,
    ) -> Result<Var> {
        let idx = prediction_index(&self.cfg, row, examples[e].latent.shape(), e)?;
        let s = examples[e].latent.shape();
        g.gather(out, Rc::new(idx), &[s[0], s[1], s[2], self.cfg.latent_channels])
    }

    /// Convenience: one unpadded example, prediction in latent layout.
    pub fn forward_single<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, ex: &DitExample<F>) -> Result<Var> {
        let row = super::sequence::single_row(ex, self.cfg.patch)?;
        let ex = std::slice::from_ref(ex);
        let r = self.forward_row(g, ps, &row, ex, None)?;
        self.predict(g, r.out, &row, ex, 0)
    }

    /// Non-differentiable single-example prediction.
    pub fn predict_latent(&self, ps: &ParamStore<f32>, ex: &DitExample<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.forward_single(&mut g, ps, ex)?;
        Ok(g.value(v).clone())
    }
}

/// Flat indices into the `(L, p²·C)` head output that assemble example
/// `e`'s latent-shaped prediction.
pub fn prediction_index(cfg: &DitConfig, row: &[Option<Token>], latent_shape: &[usize], e: usize) -> Result<Vec<u32>> {
    let p = cfg.patch;
    let po = cfg.patch_out();
    let n = num_tokens(latent_shape, p)?;
    let mut pos = vec![usize::MAX; n];
    for (i, t) in row.iter().enumerate() {
        if let Some(Token {
            example,
            source: Source::Vision { index, .. },
            ..
        }) = t
        {
            if *example == e {
                pos[*index] = i;
            }
        }
    }
    if pos.contains(&usize::MAX) {
        return Err(Error::invalid(format!("example {e} is missing vision tokens in the row")));
    }
    let out_shape = [latent_shape[0], latent_shape[1], latent_shape[2], cfg.latent_channels];
    let inv = unpatch_gather_index(&out_shape, p)?;
    Ok(inv
        .into_iter()
        .map(|flat| {
            let (tok, f) = (flat as usize / po, flat as usize % po);
            (pos[tok] * po + f) as u32
        })
        .collect())
}

/// `Σ_i w_i · mean_f (out[i,f] − target[i,f])²` over row slots; `target`
/// rows for padding and text slots are ignored when their weight is 0.
pub fn weighted_token_mse<F: Scalar>(g: &mut Graph<F>, out: Var, target: &Tensor<F>, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    if target.shape() != shape.as_slice() || weights.len() != shape[0] {
        return Err(Error::shape("token loss target/weights do not match the row"));
    }
    let po = shape[1];
    let t = g.constant(target.clone());
    let diff = g.sub(out, t)?;
    let sq = g.square(diff);
    let w: Vec<F> = weights
        .iter()
        .flat_map(|&w| std::iter::repeat_n(F::of(w / po as f64), po))
        .collect();
    g.weighted_sum(sq, Rc::new(w))
}

/// Row-layout `(L, p²·C)` target holding each example's patchified latent
/// in its vision slots and zeros elsewhere.
pub fn row_target<F: Scalar>(cfg: &DitConfig, row: &[Option<Token>], targets: &[Tensor<F>]) -> Result<Tensor<F>> {
    let po = cfg.patch_out();
    let patched: Vec<Tensor<F>> = targets
        .iter()
        .map(|t| patchify(t, cfg.patch))
        .collect::<Result<_>>()?;
    let mut data = vec![F::zero(); row.len() * po];
    for (i, t) in row.iter().enumerate() {
        if let Some(Token {
            example,
            source: Source::Vision { index, .. },
            ..
        }) = t
        {
            let src = patched
                .get(*example)
                .ok_or_else(|| Error::invalid(format!("no target for example {example}")))?;
            if src.shape()[1] != po {
                return Err(Error::shape("target channels do not match the model output"));
            }
            data[i * po..(i + 1) * po].copy_from_slice(&src.data()[index * po..(index + 1) * po]);
        }
    }
    Tensor::new(&[row.len(), po], data)
}
