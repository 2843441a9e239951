//! The invariant suite behind `verify`: one named check per structural
//! property of the stack, each run on small configurations.
//!
//! Check ids are `module.property`. A check passes when it returns `Ok`;
//! its detail string reports the measured quantity.

use std::fmt;
use std::rc::Rc;
use std::time::Instant;

use crate::ctxpar::{comm_report, decode_parallel, encode_parallel, split, Bus, ExecMode, HaloMsg};
use crate::diffusion::{
    ddim_sample, recover_eps, recover_x0, noised, uniformity_p_value, variance_experiment, velocity, NoiseSchedule,
    OraclePredictor, RankSamplers, SampleOptions, SamplerPartition, TimestepSampling,
};
use crate::dit::{
    apply_rope, example_tokens, num_tokens, row_target, single_row, text, weighted_token_mse, Dit, DitConfig,
    DitExample, Modality, RopeTable, Token,
};
use crate::error::{Error, Result};
use crate::framepack::{build_mask, loss_weights, pack, pack_first_fit, ExampleDesc, PackRequest};
use crate::numerics::attention::attention_forward;
use crate::numerics::{
    grad_check, Adam, AdamConfig, AttnMask, Fault, GradCheckOptions, Graph, ParamStore, Rng, Scalar, Tensor, Var,
};
use crate::vae3d::{
    d_hinge_loss, g_hinge_loss, latent_shape, vae_forward, vae_loss, Discriminator, LatentDist, PerceptualNet, Vae,
    VaeConfig, DOWN_STRIDES, SPACE_FACTOR, TIME_FACTOR,
};

use super::checkpoint::Checkpoint;
use super::config::{PositionMode, RunConfig};
use super::data::{generate, SynthSpec};
use super::dit_train::{DitTrainer, LatentSet};
use super::progressive::{coord_scale, resolution_logit_delta, train_progressive};

/// Switches that deliberately break the implementation under test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub fault: Fault,
}

pub struct Check {
    pub id: &'static str,
    pub statement: &'static str,
    run: fn(&VerifyOptions) -> Result<String>,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub id: &'static str,
    pub statement: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<34} {} ({:.2}s)", self.id, self.detail, self.seconds)
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub results: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn get(&self, id: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} passed, {failed} failed", self.results.len(), self.results.len() - failed)
    }
}

/// Runs every check whose id starts with one of `filters` (all checks when
/// `filters` is empty), calling `on_result` as each finishes.
pub fn run_verify(opts: &VerifyOptions, filters: &[String], mut on_result: impl FnMut(&CheckResult)) -> VerifyReport {
    let mut report = VerifyReport::default();
    for c in checks() {
        if !filters.is_empty() && !filters.iter().any(|p| c.id.starts_with(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let (passed, detail) = match (c.run)(opts) {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        let r = CheckResult { id: c.id, statement: c.statement, passed, detail, seconds: t0.elapsed().as_secs_f64() };
        on_result(&r);
        report.results.push(r);
    }
    report
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

macro_rules! check {
    ($id:literal, $statement:literal, $f:expr) => {
        Check { id: $id, statement: $statement, run: $f }
    };
}

/// The full suite in report order.
pub fn checks() -> Vec<Check> {
    vec![
        check!("numerics.tensor.shape", "product(shape) == len(data) and every dimension is at least 1", tensor_shape),
        check!("numerics.tensor.grad_shapes", "every parameter reached by backward gets a gradient of its own shape", grad_shapes),
        check!("numerics.rng.determinism", "the same seed gives the same sample stream", rng_determinism),
        check!("numerics.ops.grad_check", "every differentiable operation passes a 64-bit finite-difference check", op_grad_check),
        check!("numerics.conv.causality", "causal conv3d output i ignores input frames j > i*stride", conv_causality),
        check!("numerics.attention.block_diagonal", "block-diagonal attention equals independent per-block attention", block_diagonal),
        check!("numerics.training.determinism", "fixed seed gives a bit-identical training loss sequence", training_determinism),
        check!("vae3d.config.compression", "three down-sampling transitions compose to 4x8x8", vae_compression),
        check!("vae3d.video.image", "a single frame is a valid video and encodes to one latent frame", vae_image),
        check!("vae3d.latent.kl_nonneg", "KL of any latent distribution is non-negative", kl_nonneg),
        check!("vae3d.encoder.causality", "perturbing frame j leaves every latent i with 4i < j unchanged", encoder_causality),
        check!("vae3d.decoder.causality", "perturbing latent i leaves every frame before 4i-3 unchanged", decoder_causality),
        check!("vae3d.shape_round_trip", "decode(encode(v).mean) has the shape of v", vae_round_trip),
        check!("vae3d.image_no_future", "an image encodes exactly like the first frame of a video", image_no_future),
        check!("vae3d.loss.kl_nonneg", "the KL loss component is non-negative on every batch", loss_kl_nonneg),
        check!("vae3d.loss.grad_check", "the VAE loss without GAN passes a 64-bit gradient check", vae_grad_check),
        check!("vae3d.disc.grad_check", "discriminator hinge losses pass a 64-bit gradient check", disc_grad_check),
        check!("ctxpar.plan.partition", "chunks are non-empty, ordered, disjoint and exhaustive", plan_partition),
        check!("ctxpar.plan.alignment", "chunks after the first are whole multiples of the temporal stride product", plan_alignment),
        check!("ctxpar.halo.payload", "every halo carries kt-1 frames from rank r to rank r+1", halo_payload),
        check!("ctxpar.equivalence", "sharded encode and decode equal the single-device result exactly", ctxpar_equivalence),
        check!("ctxpar.message_count", "each causal layer exchanges exactly R-1 messages", ctxpar_message_count),
        check!("ctxpar.forward_only", "halos only travel forward in time; backward sends are rejected", ctxpar_forward_only),
        check!("dit.config.dims", "heads*head_dim == d_model and vision length == T'(H'/p)(W'/p)", dit_dims),
        check!("dit.tokens.text_first", "text tokens precede vision tokens in every example", text_first),
        check!("dit.tokens.coords", "vision coordinates lie inside the token grid", token_coords),
        check!("dit.rope.split", "RoPE splits head_dim 3/8, 3/8, 2/8 into even slices", rope_split),
        check!("dit.adaln.experts", "every block has distinct vision and text modulation parameters", adaln_experts),
        check!("dit.adaln.zero_gates", "gate columns of every modulation head start at zero", zero_gates),
        check!("dit.identity_at_init", "the block stack is the identity on its residual stream at init", identity_at_init),
        check!("dit.rope.relative", "attention logits depend only on coordinate offsets", rope_relative),
        check!("dit.expert_split", "flipping modality labels changes outputs after one training step", expert_split),
        check!("dit.mixing", "every vision output has gradient from every text token", mixing),
        check!("dit.param_accounting", "expert AdaLN doubles modulation parameters and nothing else", param_accounting),
        check!("diffusion.schedule.decreasing", "a_t strictly decreases", schedule_decreasing),
        check!("diffusion.schedule.zero_terminal", "a_T == 0 exactly", schedule_zero_terminal),
        check!("diffusion.schedule.first_preserved", "rescaling leaves a_1 unchanged", schedule_first),
        check!("diffusion.schedule.unit", "a_t^2 + s_t^2 == 1 within 1e-6", schedule_unit),
        check!("diffusion.intervals.partition", "rank intervals are disjoint, exhaustive, ordered, sizes within 1", intervals),
        check!("diffusion.v_identities", "x0 and eps are recovered from (z_t, v) within 1e-5", v_identities),
        check!("diffusion.explicit.coverage", "each synchronized step hits every interval exactly once", explicit_coverage),
        check!("diffusion.explicit.uniform", "the explicit marginal is uniform on [1, T] (chi-square p > 0.01)", explicit_uniform),
        check!("diffusion.explicit.variance", "explicit sampling lowers step-loss variance at 99% confidence", explicit_variance),
        check!("diffusion.ddim.oracle", "DDIM with an oracle predictor recovers x0 within 1e-4", ddim_oracle),
        check!("framepack.example.fits", "every example and every row fits the capacity", pack_fits),
        check!("framepack.row.isolation", "no token attends across examples or to padding", pack_isolation),
        check!("framepack.row.contiguous", "every example appears in exactly one row, contiguously", pack_contiguous),
        check!("framepack.equivalence", "packed outputs and losses equal standalone runs within 1e-6", pack_equivalence),
        check!("framepack.ffd", "FFD uses no more rows than examples or than arrival-order first fit", pack_ffd),
        check!("framepack.joint", "images and videos share rows", pack_joint),
        check!("harness.data.captions", "caption tokens encode shape, color and motion", data_captions),
        check!("harness.data.regeneration", "regenerating from (spec, seed) is bit-identical", data_regeneration),
        check!("harness.stages.order", "stages run in order, each warm-starting from the last", stages_order),
        check!("harness.checkpoint.round_trip", "checkpoint load(save(x)) is bit-identical", checkpoint_round_trip),
        check!("harness.checkpoint.crc", "a corrupted checkpoint is rejected", checkpoint_crc),
        check!("harness.progressive.resume", "an interrupted progressive run resumes the same loss sequence", progressive_resume),
        check!("harness.rope.extrapolation", "extrapolation leaves in-grid logits unchanged within 1e-6", rope_extrapolation),
        check!("harness.rope.interpolation", "interpolation changes in-grid logits", rope_interpolation),
    ]
}

fn random_store(specs: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = Rng::new(seed);
    let mut ps = ParamStore::new();
    for (name, shape) in specs {
        ps.insert(*name, rng.normal_tensor(shape, 0.5));
    }
    ps
}

fn jitter<F: Scalar>(ps: &mut ParamStore<F>, seed: u64, std: f64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for x in ps.get_mut(id).data_mut() {
            *x = F::of(x.f64() + std * rng.normal());
        }
    }
}

fn frame_len(v: &Tensor<f32>) -> usize {
    v.shape()[1..].iter().product()
}

// ---- numerics ----

fn tensor_shape(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(1);
    for _ in 0..50 {
        let shape: Vec<usize> = (0..1 + rng.below(4)).map(|_| 1 + rng.below(5)).collect();
        let t: Tensor<f32> = rng.normal_tensor(&shape, 1.0);
        ensure(t.len() == shape.iter().product::<usize>(), || format!("{shape:?} holds {}", t.len()))?;
    }
    ensure(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err(), || "length mismatch accepted".into())?;
    ensure(Tensor::<f32>::new(&[2, 0], vec![]).is_err(), || "zero dimension accepted".into())?;
    Ok("50 random shapes; mismatches rejected".into())
}

fn grad_shapes(_: &VerifyOptions) -> Result<String> {
    let (dit, ps) = Dit::new(DitConfig::tiny(), 1)?;
    let mut rng = Rng::new(2);
    let ex = DitExample { latent: rng.normal_tensor(&[2, 4, 4, 2], 1.0), text: text::caption_tokens(0, 0, 0)?, timestep: 10.0 };
    let mut g = Graph::new();
    let out = dit.forward_single(&mut g, &ps, &ex)?;
    let loss = g.square(out);
    let loss = g.sum(loss);
    let grads = g.backward(loss)?;
    let got = grads.params();
    // embedding rows of unused tokens still belong to a reached parameter
    ensure(got.len() == ps.len(), || format!("{} of {} parameters received gradients", got.len(), ps.len()))?;
    for (id, gr) in got {
        ensure(gr.shape() == ps.get(id).shape(), || format!("{} gradient shape {:?}", ps.name(id), gr.shape()))?;
    }
    Ok(format!("{} parameters", ps.len()))
}

fn rng_determinism(_: &VerifyOptions) -> Result<String> {
    let draw = |seed| {
        let mut r = Rng::new(seed);
        (0..1000).map(|i| if i % 2 == 0 { r.uniform() } else { r.normal() }.to_bits()).collect::<Vec<_>>()
    };
    ensure(draw(9) == draw(9), || "streams differ".into())?;
    ensure(draw(9) != draw(10), || "different seeds agree".into())?;
    let mut a = Rng::new(3);
    a.normal();
    let mut b = Rng::from_state(a.state());
    ensure(a.uniform().to_bits() == b.uniform().to_bits(), || "restored state diverges".into())?;
    Ok("1000 draws".into())
}

fn op_grad_check(_: &VerifyOptions) -> Result<String> {
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    let ps = random_store(&[("a", &[3, 4]), ("b", &[3, 4]), ("c", &[4])], 2);
    let r = grad_check(&ps, |g, ps| {
        let a = g.param(ps, ps.id("a").expect("a"));
        let b = g.param(ps, ps.id("b").expect("b"));
        let c = g.param(ps, ps.id("c").expect("c"));
        let x = g.mul(a, b)?;
        let x = g.add_bias(x, c)?;
        let y = g.silu(x);
        let z = g.gelu(b);
        let w = g.sub(y, z)?;
        let w = g.mul_bias(w, c)?;
        let e = g.exp(a);
        let w = g.add(w, e)?;
        let w = g.leaky_relu(w, 0.2);
        let r = g.relu(a);
        let w = g.add(w, r)?;
        let w = g.add_scalar(w, 0.5);
        let w = g.square(w);
        Ok(g.mean(w))
    }, &opts)?;
    worst = worst.max(r.max_rel_error);
    let ps = random_store(&[("x", &[5, 6]), ("w", &[6, 4]), ("b", &[4]), ("y", &[2, 4])], 3);
    let r = grad_check(&ps, |g, ps| {
        let x = g.param(ps, ps.id("x").expect("x"));
        let w = g.param(ps, ps.id("w").expect("w"));
        let b = g.param(ps, ps.id("b").expect("b"));
        let y = g.param(ps, ps.id("y").expect("y"));
        let h = g.linear(x, w, Some(b))?;
        let h = g.layer_norm(h)?;
        let h = g.concat(&[h, y], 0)?;
        let h2 = g.concat(&[h, h], 1)?;
        let h2 = g.select_rows(h2, &[0, 6, 3, 3])?;
        let h2 = g.slice_last(h2, 1, 7)?;
        let h2 = g.reshape(h2, &[2, 12])?;
        let h2 = g.slice_outer(h2, 0, 2)?;
        let wts: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        g.weighted_sum(h2, Rc::new(wts))
    }, &opts)?;
    worst = worst.max(r.max_rel_error);
    let ps = random_store(&[("x", &[3, 4, 4, 2]), ("k", &[3, 3, 3, 2, 4]), ("kb", &[4]), ("gamma", &[4]), ("beta", &[4])], 4);
    let r = grad_check(&ps, |g, ps| {
        let x = g.param(ps, ps.id("x").expect("x"));
        let k = g.param(ps, ps.id("k").expect("k"));
        let kb = g.param(ps, ps.id("kb").expect("kb"));
        let gm = g.param(ps, ps.id("gamma").expect("gamma"));
        let bt = g.param(ps, ps.id("beta").expect("beta"));
        let h = g.conv3d(x, k, Some(kb), (2, 2, 2))?;
        let h = g.group_norm(h, gm, bt, 2)?;
        let h = g.upsample(h, true, true)?;
        let h = g.square(h);
        let s = g.sum(h);
        Ok(g.scale(s, 0.1))
    }, &opts)?;
    worst = worst.max(r.max_rel_error);
    let ps = random_store(&[("q", &[5, 8]), ("k", &[5, 8]), ("v", &[5, 8]), ("tab", &[6, 8])], 5);
    let r = grad_check(&ps, |g, ps| {
        let q = g.param(ps, ps.id("q").expect("q"));
        let k = g.param(ps, ps.id("k").expect("k"));
        let v = g.param(ps, ps.id("v").expect("v"));
        let tab = g.param(ps, ps.id("tab").expect("tab"));
        let cos: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
        let sin: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).sin()).collect();
        let (cos, sin) = (Rc::new(cos), Rc::new(sin));
        let q = g.rope(q, cos.clone(), sin.clone(), 2)?;
        let k = g.rope(k, cos, sin, 2)?;
        let mask = Rc::new(AttnMask::from_segments(&[0, 0, 0, 1, 1]));
        let o = g.attention(q, k, v, 2, mask)?;
        let idx: Vec<u32> = [0u32, 5, 2, 2, 1].iter().flat_map(|r| (0..8).map(move |c| r * 8 + c)).collect();
        let e = g.gather(tab, Rc::new(idx), &[5, 8])?;
        let o = g.add(o, e)?;
        let t = g.constant(Tensor::full(&[5, 8], 0.25));
        g.mse(o, t)
    }, &opts)?;
    worst = worst.max(r.max_rel_error);
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn conv_causality(o: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(11);
    let x: Tensor<f64> = rng.normal_tensor(&[9, 4, 4, 2], 1.0);
    let k: Tensor<f64> = rng.normal_tensor(&[3, 3, 3, 2, 2], 1.0);
    let mut compared = 0;
    for stride in [(1, 1, 1), (2, 2, 2), (1, 2, 2)] {
        let run = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut g = Graph::new().with_fault(o.fault);
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.conv3d(xv, kv, None, stride)?;
            Ok(g.value(y).clone())
        };
        let base = run(&x)?;
        let fl = frame_len_f64(&x);
        let ol = base.shape()[1..].iter().product::<usize>();
        for j in 0..9 {
            let mut p = x.clone();
            for v in &mut p.data_mut()[j * fl..(j + 1) * fl] {
                *v += 1.0;
            }
            let out = run(&p)?;
            for i in 0..base.shape()[0] {
                if j > i * stride.0 {
                    compared += 1;
                    ensure(out.data()[i * ol..(i + 1) * ol] == base.data()[i * ol..(i + 1) * ol], || {
                        format!("stride {stride:?}: output {i} moved when frame {j} changed")
                    })?;
                }
            }
        }
    }
    Ok(format!("{compared} (output, future frame) pairs unchanged"))
}

fn frame_len_f64(v: &Tensor<f64>) -> usize {
    v.shape()[1..].iter().product()
}

fn block_diagonal(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let sizes: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(4)).collect();
        let l: usize = sizes.iter().sum();
        let ids: Vec<i64> = sizes.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s as i64, n)).collect();
        let q: Tensor<f32> = rng.normal_tensor(&[l, 8], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[l, 8], 1.0);
        let v: Tensor<f32> = rng.normal_tensor(&[l, 8], 1.0);
        let (out, _) = attention_forward(&q, &k, &v, 2, &AttnMask::from_segments(&ids))?;
        let mut s = 0;
        for &n in &sizes {
            let sub = |t: &Tensor<f32>| t.slice_outer(s, s + n);
            let (o, _) = attention_forward(&sub(&q)?, &sub(&k)?, &sub(&v)?, 2, &AttnMask::full(n))?;
            worst = worst.max(out.slice_outer(s, s + n)?.max_abs_diff(&o));
            s += n;
        }
    }
    ensure(worst <= 1e-6, || format!("max |Δ| {worst:.3e}"))?;
    Ok(format!("max |Δ| {worst:.1e}"))
}

fn toy_latents(n: usize, seed: u64) -> Result<LatentSet> {
    let mut rng = Rng::new(seed);
    Ok(LatentSet {
        latents: (0..n).map(|_| rng.normal_tensor(&[2, 4, 4, 2], 1.0)).collect(),
        captions: (0..n).map(|i| text::caption_tokens(i % 6, i % 3, i % 5)).collect::<Result<_>>()?,
        noise: vec![0.0; n],
        scale: 1.0,
    })
}

fn tiny_trainer() -> Result<DitTrainer> {
    let cfg = RunConfig::tiny();
    DitTrainer::new(cfg.dit, cfg.dit_train, cfg.adam, 5)
}

fn training_determinism(_: &VerifyOptions) -> Result<String> {
    let data = toy_latents(4, 1)?;
    let losses = || -> Result<Vec<u64>> {
        let mut t = tiny_trainer()?;
        Ok(t.run(&data, 4, |_, _| Ok(()))?.iter().map(|r| r.loss.to_bits()).collect())
    };
    ensure(losses()? == losses()?, || "loss sequences differ".into())?;
    Ok("4 steps bit-identical".into())
}

// ---- vae3d ----

fn tiny_vae(seed: u64) -> Result<(Vae, ParamStore<f32>)> {
    Vae::new(VaeConfig::tiny(), seed)
}

fn encode_with(vae: &Vae, ps: &ParamStore<f32>, v: &Tensor<f32>, fault: Fault) -> Result<LatentDist> {
    let mut g = Graph::new().with_fault(fault);
    let x = g.constant(v.clone());
    let (m, lv) = vae.encode(&mut g, ps, x)?;
    Ok(LatentDist { mean: g.value(m).clone(), logvar: g.value(lv).clone() })
}

fn decode_with(vae: &Vae, ps: &ParamStore<f32>, z: &Tensor<f32>, fault: Fault) -> Result<Tensor<f32>> {
    let mut g = Graph::new().with_fault(fault);
    let x = g.constant(z.clone());
    let out = vae.decode(&mut g, ps, x)?;
    Ok(g.value(out).clone())
}

fn vae_compression(_: &VerifyOptions) -> Result<String> {
    ensure(DOWN_STRIDES == [(2, 2, 2), (2, 2, 2), (1, 2, 2)], || format!("strides {DOWN_STRIDES:?}"))?;
    let t: usize = DOWN_STRIDES.iter().map(|s| s.0).product();
    let s: usize = DOWN_STRIDES.iter().map(|s| s.1).product();
    ensure(t == TIME_FACTOR && s == SPACE_FACTOR && (t, s) == (4, 8), || format!("net factors {t}x{s}x{s}"))?;
    let (vae, ps) = tiny_vae(1)?;
    let v = Rng::new(2).uniform_tensor(&[9, 16, 16, 3], -1.0, 1.0);
    let z = vae.encode_video(&ps, &v)?.mean;
    ensure(z.shape() == [3, 2, 2, 2], || format!("latent shape {:?}", z.shape()))?;
    Ok("(9,16,16,3) -> (3,2,2,2)".into())
}

fn vae_image(o: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(2)?;
    let v = Rng::new(3).uniform_tensor(&[1, 16, 16, 3], -1.0, 1.0);
    let d = encode_with(&vae, &ps, &v, o.fault)?;
    ensure(d.mean.shape() == latent_shape(1, 16, 16, 2)?, || format!("latent shape {:?}", d.mean.shape()))?;
    ensure(latent_shape(0, 16, 16, 2).is_err(), || "T=0 accepted".into())?;
    Ok("T=1 -> one latent frame; T=0 rejected".into())
}

fn kl_nonneg(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(4);
    let mut least = f64::INFINITY;
    for _ in 0..200 {
        let std = rng.uniform_range(0.01, 5.0);
        let d = LatentDist { mean: rng.normal_tensor(&[2, 2, 2, 2], std), logvar: rng.normal_tensor(&[2, 2, 2, 2], std) };
        least = least.min(d.kl());
    }
    let zero = LatentDist { mean: Tensor::zeros(&[1, 1, 1, 2]), logvar: Tensor::zeros(&[1, 1, 1, 2]) };
    ensure(least >= 0.0 && zero.kl() == 0.0, || format!("min KL {least:.3e}, standard normal {}", zero.kl()))?;
    Ok(format!("min KL over 200 draws {least:.3e}"))
}

fn encoder_causality(o: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(5)?;
    let mut rng = Rng::new(6);
    let v = rng.uniform_tensor(&[9, 16, 16, 3], -1.0, 1.0);
    let base = encode_with(&vae, &ps, &v, o.fault)?;
    let fl = frame_len(&v);
    let ll = frame_len(&base.mean);
    let mut compared = 0;
    for j in 1..9 {
        let mut p = v.clone();
        for x in &mut p.data_mut()[j * fl..(j + 1) * fl] {
            *x = rng.uniform_range(-1.0, 1.0) as f32;
        }
        let d = encode_with(&vae, &ps, &p, o.fault)?;
        let keep = (j - 1) / 4 + 1;
        compared += keep;
        ensure(
            d.mean.data()[..keep * ll] == base.mean.data()[..keep * ll]
                && d.logvar.data()[..keep * ll] == base.logvar.data()[..keep * ll],
            || format!("frame {j} changed an earlier latent"),
        )?;
    }
    Ok(format!("{compared} (latent, future frame) pairs unchanged"))
}

fn decoder_causality(o: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(7)?;
    let mut rng = Rng::new(8);
    let z = rng.normal_tensor(&[3, 2, 2, 2], 1.0);
    let base = decode_with(&vae, &ps, &z, o.fault)?;
    let fl = frame_len(&base);
    let ll = frame_len(&z);
    for i in 1..3 {
        let mut p = z.clone();
        for x in &mut p.data_mut()[i * ll..(i + 1) * ll] {
            *x += 1.0;
        }
        let out = decode_with(&vae, &ps, &p, o.fault)?;
        let keep = 4 * i - 3;
        ensure(out.data()[..keep * fl] == base.data()[..keep * fl], || format!("latent {i} changed an earlier frame"))?;
    }
    Ok("latents 1, 2 leave earlier frames unchanged".into())
}

fn vae_round_trip(_: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(9)?;
    let mut rng = Rng::new(10);
    let mut n = 0;
    for t in [1, 5, 9] {
        for (h, w) in [(8, 8), (16, 8), (16, 24)] {
            let v = rng.uniform_tensor(&[t, h, w, 3], -1.0, 1.0);
            let r = vae.decode_latent(&ps, &vae.encode_video(&ps, &v)?.mean)?;
            ensure(r.shape() == v.shape(), || format!("{:?} -> {:?}", v.shape(), r.shape()))?;
            n += 1;
        }
    }
    Ok(format!("{n} shapes"))
}

fn image_no_future(o: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(11)?;
    let v = Rng::new(12).uniform_tensor(&[5, 16, 16, 3], -1.0, 1.0);
    let full = encode_with(&vae, &ps, &v, o.fault)?;
    let img = encode_with(&vae, &ps, &v.slice_outer(0, 1)?, o.fault)?;
    let ll = frame_len(&full.mean);
    ensure(img.mean.data() == &full.mean.data()[..ll], || "image latent differs from the first video latent".into())?;
    Ok("image latent == first video latent".into())
}

fn loss_kl_nonneg(_: &VerifyOptions) -> Result<String> {
    let cfg = VaeConfig::tiny();
    let (vae, ps) = Vae::new(cfg.clone(), 13)?;
    let net = PerceptualNet::new(1);
    let mut rng = Rng::new(14);
    let mut least = f64::INFINITY;
    for _ in 0..5 {
        let video: Tensor<f32> = rng.uniform_tensor(&[5, 8, 8, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.constant(video);
        let f = vae_forward(&mut g, &vae, &ps, v, None)?;
        let terms = vae_loss(&mut g, &cfg, &net, v, f.recon, f.mean, f.logvar, None, 0)?;
        least = least.min(terms.values(&g)?.kl);
    }
    ensure(least >= 0.0, || format!("KL component {least}"))?;
    Ok(format!("min KL component {least:.3e}"))
}

fn vae_grad_check(_: &VerifyOptions) -> Result<String> {
    let cfg = VaeConfig::tiny();
    let (vae, ps) = Vae::new(cfg.clone(), 8)?;
    let ps64 = ps.cast::<f64>();
    let mut rng = Rng::new(9);
    let video: Tensor<f64> = rng.uniform_tensor(&[5, 8, 8, 3], -1.0, 1.0);
    let eps: Tensor<f64> = rng.normal_tensor(&[2, 1, 1, 2], 1.0);
    let net = PerceptualNet::new(1);
    let r = grad_check(
        &ps64,
        |g: &mut Graph<f64>, p| {
            let v = g.constant(video.clone());
            let f = vae_forward(g, &vae, p, v, Some(&eps))?;
            Ok(vae_loss(g, &cfg, &net, v, f.recon, f.mean, f.logvar, None, 0)?.total)
        },
        &GradCheckOptions { max_per_tensor: Some(3), ..Default::default() },
    )?;
    ensure(r.max_rel_error < 1e-4, || format!("max relative error {:.3e} at {}", r.max_rel_error, r.worst))?;
    Ok(format!("{} coordinates, max relative error {:.2e}", r.checked, r.max_rel_error))
}

fn disc_grad_check(_: &VerifyOptions) -> Result<String> {
    let (disc, ps) = Discriminator::with_channels(3, [3, 4, 4, 4, 1]);
    let ps64 = ps.cast::<f64>();
    let mut rng = Rng::new(4);
    let real: Tensor<f64> = rng.uniform_tensor(&[5, 8, 8, 3], -1.0, 1.0);
    let fake: Tensor<f64> = rng.uniform_tensor(&[5, 8, 8, 3], -1.0, 1.0);
    // a small step keeps the perturbation away from leaky-ReLU and hinge kinks
    let opts = GradCheckOptions { eps: 1e-7, max_per_tensor: Some(6), ..Default::default() };
    let d = grad_check(
        &ps64,
        |g: &mut Graph<f64>, p| {
            let r = g.constant(real.clone());
            let f = g.constant(fake.clone());
            let lr = disc.logits(g, p, r, false)?;
            let lf = disc.logits(g, p, f, false)?;
            Ok(d_hinge_loss(g, lr, lf))
        },
        &opts,
    )?;
    let gen = grad_check(
        &ps64,
        |g: &mut Graph<f64>, p| {
            let f = g.constant(fake.clone());
            let lf = disc.logits(g, p, f, false)?;
            Ok(g_hinge_loss(g, lf))
        },
        &opts,
    )?;
    let worst = d.max_rel_error.max(gen.max_rel_error);
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

// ---- ctxpar ----

fn plan_partition(_: &VerifyOptions) -> Result<String> {
    let mut n = 0;
    for t in [1, 5, 9, 13, 17, 33] {
        for ranks in 1..=((t - 1) / 4 + 1) {
            let p = split(t, ranks)?;
            p.validate(t)?;
            ensure(p.lengths().iter().all(|&l| l > 0), || format!("empty chunk in {:?}", p.lengths()))?;
            n += 1;
        }
    }
    ensure(split(6, 2).is_err() && split(5, 3).is_err(), || "unalignable split accepted".into())?;
    Ok(format!("{n} plans"))
}

fn plan_alignment(_: &VerifyOptions) -> Result<String> {
    let stride: usize = DOWN_STRIDES.iter().map(|s| s.0).product();
    for t in [5, 9, 17, 33] {
        for ranks in 2..=((t - 1) / 4 + 1) {
            let p = split(t, ranks)?;
            for (r, &(a, b)) in p.chunk_bounds.iter().enumerate().skip(1) {
                ensure((b - a) % stride == 0 && (a - 1) % stride == 0, || format!("T={t} R={ranks}: chunk {r} is ({a},{b})"))?;
            }
        }
    }
    Ok(format!("chunks after the first are multiples of {stride} frames"))
}

fn halo_payload(_: &VerifyOptions) -> Result<String> {
    let cfg = VaeConfig::tiny();
    let (vae, ps) = Vae::new(cfg.clone(), 1)?;
    let v = Rng::new(2).uniform_tensor(&[17, 16, 16, 3], -1.0, 1.0);
    let par = encode_parallel(&vae, &ps, &v, 4, ExecMode::Sequential)?;
    let stats = &par.log.layers;
    for m in &par.log.messages {
        let kt = stats.iter().find(|l| l.layer_id == m.layer_id).map_or(0, |l| l.kt);
        ensure(m.shape[0] == kt - 1 && m.to_rank == m.from_rank + 1, || format!("message {m:?}"))?;
    }
    Ok(format!("{} messages", par.log.messages.len()))
}

fn ctxpar_equivalence(_: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(3)?;
    let mut rng = Rng::new(4);
    let v = rng.uniform_tensor(&[17, 16, 16, 3], -1.0, 1.0);
    let serial = vae.encode_video(&ps, &v)?;
    for ranks in [1, 2, 4] {
        let par = encode_parallel(&vae, &ps, &v, ranks, ExecMode::Sequential)?;
        let d = par.dist.mean.max_abs_diff(&serial.mean).max(par.dist.logvar.max_abs_diff(&serial.logvar));
        ensure(d == 0.0, || format!("encoder R={ranks}: max |Δ| {d:e}"))?;
    }
    let z = rng.normal_tensor(&[5, 2, 2, 2], 1.0);
    let dec = vae.decode_latent(&ps, &z)?;
    for ranks in [2, 4] {
        let (par, _) = decode_parallel(&vae, &ps, &z, ranks, ExecMode::Sequential)?;
        let d = par.max_abs_diff(&dec);
        ensure(d == 0.0, || format!("decoder R={ranks}: max |Δ| {d:e}"))?;
    }
    Ok("encoder R=1,2,4 and decoder R=2,4 exact".into())
}

fn ctxpar_message_count(_: &VerifyOptions) -> Result<String> {
    let (vae, ps) = tiny_vae(5)?;
    let v = Rng::new(6).uniform_tensor(&[17, 16, 16, 3], -1.0, 1.0);
    let mut layers = 0;
    for ranks in [2, 4] {
        let rep = comm_report(&encode_parallel(&vae, &ps, &v, ranks, ExecMode::Sequential)?.log);
        for l in &rep.layers {
            let want = if l.kt > 1 { ranks - 1 } else { 0 };
            ensure(l.messages == want, || format!("R={ranks} layer {}: {} messages", l.layer_id, l.messages))?;
        }
        layers = rep.layers.iter().filter(|l| l.kt > 1).count();
    }
    Ok(format!("{layers} causal layers, R-1 messages each"))
}

fn ctxpar_forward_only(_: &VerifyOptions) -> Result<String> {
    let msg = |from, to| HaloMsg { from_rank: from, to_rank: to, layer_id: 0, payload: Tensor::zeros(&[2, 1, 1, 1]), element_count: 2 };
    let bus = Bus::new(3, false);
    ensure(bus.send(msg(1, 0)).is_err() && bus.send(msg(0, 2)).is_err(), || "non-forward message accepted".into())?;
    let (vae, ps) = tiny_vae(7)?;
    let v = Rng::new(8).uniform_tensor(&[9, 8, 8, 3], -1.0, 1.0);
    let log = encode_parallel(&vae, &ps, &v, 3, ExecMode::Threaded)?.log;
    ensure(log.messages.iter().all(|m| m.to_rank == m.from_rank + 1), || "backward message logged".into())?;
    Ok(format!("{} forward messages; backward sends rejected", log.messages.len()))
}

// ---- dit ----

fn dit_dims(_: &VerifyOptions) -> Result<String> {
    for cfg in [DitConfig::default(), DitConfig::tiny()] {
        ensure(cfg.heads * cfg.head_dim() == cfg.d_model, || format!("{} heads x {}", cfg.heads, cfg.head_dim()))?;
    }
    ensure(DitConfig { d_model: 65, ..DitConfig::default() }.validate().is_err(), || "indivisible d_model accepted".into())?;
    for shape in [[1, 4, 4, 8], [5, 4, 6, 8], [3, 8, 8, 8]] {
        let want = shape[0] * (shape[1] / 2) * (shape[2] / 2);
        ensure(num_tokens(&shape, 2)? == want, || format!("{shape:?}"))?;
    }
    Ok("dimensions and token counts consistent".into())
}

fn text_first(_: &VerifyOptions) -> Result<String> {
    let toks = example_tokens(0, 4, &[3, 4, 4, 2], 2)?;
    let first_vision = toks.iter().position(|t| t.modality == Modality::Vision).unwrap_or(toks.len());
    ensure(toks[first_vision..].iter().all(|t| t.modality == Modality::Vision) && first_vision == 4, || "text after vision".into())?;
    let descs = vec![ExampleDesc { text_len: 4, grid: [2, 4, 4] }, ExampleDesc { text_len: 3, grid: [1, 4, 4] }];
    let b = pack(&PackRequest { examples: descs, capacity: 40, patch: 2 })?;
    for row in b.all_rows()? {
        let mut seen_vision = std::collections::HashSet::new();
        for t in row.iter().flatten() {
            match t.modality {
                Modality::Vision => {
                    seen_vision.insert(t.example);
                }
                Modality::Text => ensure(!seen_vision.contains(&t.example), || "text after vision in a packed row".into())?,
            }
        }
    }
    Ok("single and packed rows".into())
}

fn token_coords(_: &VerifyOptions) -> Result<String> {
    for shape in [[1, 2, 2, 1], [3, 4, 6, 1], [5, 8, 4, 1]] {
        let toks = example_tokens(0, 0, &shape, 2)?;
        for t in &toks {
            let [ct, cy, cx] = t.coords().expect("vision token");
            ensure(ct < shape[0] && cy < shape[1] / 2 && cx < shape[2] / 2, || format!("{:?} in {shape:?}", [ct, cy, cx]))?;
        }
    }
    Ok("three grids".into())
}

fn rope_split(_: &VerifyOptions) -> Result<String> {
    for dh in [16, 32, 64, 128] {
        let r = RopeTable::new(dh, 10_000.0)?;
        ensure(r.split == [3 * dh / 8, 3 * dh / 8, dh / 4], || format!("dh {dh}: {:?}", r.split))?;
        ensure(r.split.iter().all(|d| d % 2 == 0), || format!("odd slice {:?}", r.split))?;
    }
    Ok("dh 16..128".into())
}

fn adaln_experts(_: &VerifyOptions) -> Result<String> {
    let cfg = DitConfig::tiny();
    let (_, ps) = Dit::new(cfg.clone(), 1)?;
    for b in 0..cfg.layers {
        for part in ["weight", "bias"] {
            let v = ps.id(&format!("blocks.{b}.mod_vision.{part}"));
            let t = ps.id(&format!("blocks.{b}.mod_text.{part}"));
            ensure(v.is_some() && t.is_some() && v != t, || format!("block {b} lacks two {part} sets"))?;
        }
    }
    Ok(format!("{} blocks", cfg.layers))
}

fn zero_gates(_: &VerifyOptions) -> Result<String> {
    let cfg = DitConfig::tiny();
    let d = cfg.d_model;
    let (_, ps) = Dit::new(cfg.clone(), 2)?;
    for b in 0..cfg.layers {
        for head in ["mod_vision", "mod_text"] {
            let w = ps.by_name(&format!("blocks.{b}.{head}.weight")).ok_or_else(|| Error::invalid("missing head"))?;
            let bias = ps.by_name(&format!("blocks.{b}.{head}.bias")).ok_or_else(|| Error::invalid("missing head"))?;
            let rows = w.data().chunks_exact(6 * d).chain(std::iter::once(bias.data()));
            for row in rows {
                ensure(row[2 * d..3 * d].iter().chain(&row[5 * d..]).all(|&x| x == 0.0), || format!("block {b} {head} gate not zero"))?;
            }
        }
    }
    Ok("attention and MLP gates zero".into())
}

fn identity_at_init(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(3);
    let ex = DitExample { latent: rng.normal_tensor(&[2, 4, 4, 2], 1.0), text: text::caption_tokens(1, 1, 1)?, timestep: 321.0 };
    let row = single_row(&ex, 2)?;
    for layers in [1, 3] {
        let (dit, ps) = Dit::new(DitConfig { layers, ..DitConfig::tiny() }, 7)?;
        let mut g = Graph::new();
        let r = dit.forward_row(&mut g, &ps, &row, std::slice::from_ref(&ex), None)?;
        ensure(g.value(r.hidden_in) == g.value(r.hidden_out), || format!("{layers} blocks change the residual stream"))?;
    }
    Ok("1 and 3 blocks exact".into())
}

fn rope_relative(_: &VerifyOptions) -> Result<String> {
    let table = RopeTable::new(32, 10_000.0)?;
    let mut rng = Rng::new(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q: Tensor<f32> = rng.normal_tensor(&[1, 1, 32], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[1, 1, 32], 1.0);
        let c1 = [rng.below(8), rng.below(8), rng.below(8)];
        let c2 = [rng.below(8), rng.below(8), rng.below(8)];
        let dl = [rng.below(8), rng.below(8), rng.below(8)];
        let logit = |a: [usize; 3], b: [usize; 3]| -> Result<f64> {
            let qr = apply_rope(&q, &[Some(a)], &table)?;
            let kr = apply_rope(&k, &[Some(b)], &table)?;
            Ok(qr.data().iter().zip(kr.data()).map(|(x, y)| (x * y) as f64).sum())
        };
        let shift = |c: [usize; 3]| [c[0] + dl[0], c[1] + dl[1], c[2] + dl[2]];
        worst = worst.max((logit(c1, c2)? - logit(shift(c1), shift(c2))?).abs());
    }
    ensure(worst < 1e-5, || format!("max |Δ| {worst:.3e}"))?;
    Ok(format!("100 shifted pairs, max |Δ| {worst:.1e}"))
}

fn expert_split(_: &VerifyOptions) -> Result<String> {
    let (dit, mut ps) = Dit::new(DitConfig::tiny(), 11)?;
    let mut rng = Rng::new(12);
    let ex = DitExample { latent: rng.normal_tensor(&[2, 4, 4, 2], 1.0), text: text::caption_tokens(0, 0, 1)?, timestep: 700.0 };
    let target: Tensor<f32> = rng.normal_tensor(&[2, 4, 4, 2], 1.0);
    let mut adam = Adam::new(AdamConfig::default(), &ps);
    let mut g = Graph::new();
    let p = dit.forward_single(&mut g, &ps, &ex)?;
    let t = g.constant(target);
    let loss = g.mse(p, t)?;
    let grads = g.backward(loss)?.to_store(&ps);
    adam.step(&mut ps, &grads);
    let row = single_row(&ex, 2)?;
    let flipped: Vec<Option<Token>> = row
        .iter()
        .map(|t| {
            t.map(|t| Token {
                modality: match t.modality {
                    Modality::Text => Modality::Vision,
                    Modality::Vision => Modality::Text,
                },
                ..t
            })
        })
        .collect();
    let run = |row: &[Option<Token>]| -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let r = dit.forward_row(&mut g, &ps, row, std::slice::from_ref(&ex), None)?;
        Ok(g.value(r.out).clone())
    };
    let d = run(&row)?.max_abs_diff(&run(&flipped)?);
    ensure(d > 0.0, || "outputs identical after flipping modalities".into())?;
    Ok(format!("max |Δ| {d:.2e}"))
}

fn mixing(_: &VerifyOptions) -> Result<String> {
    let (dit, ps) = Dit::new(DitConfig { layers: 1, ..DitConfig::tiny() }, 8)?;
    let mut ps = ps.cast::<f64>();
    jitter(&mut ps, 9, 0.1);
    let mut rng = Rng::new(10);
    let ex = DitExample::<f64> { latent: rng.normal_tensor(&[2, 4, 4, 2], 1.0), text: text::caption_tokens(2, 1, 0)?, timestep: 600.0 };
    let row = single_row(&ex, 2)?;
    let n_text = ex.text.len();
    let d = dit.cfg.d_model;
    for i in n_text..row.len() {
        let mut g = Graph::new();
        let r = dit.forward_row(&mut g, &ps, &row, std::slice::from_ref(&ex), None)?;
        let o = g.slice_outer(r.out, i, i + 1)?;
        let s = g.sum(o);
        let grads = g.backward(s)?;
        let gh = grads.get(r.hidden_in).ok_or_else(|| Error::invalid("no gradient reached the embeddings"))?;
        for j in 0..n_text {
            let norm: f64 = gh.data()[j * d..(j + 1) * d].iter().map(|x| x * x).sum();
            ensure(norm > 0.0, || format!("vision token {i} has no gradient from text token {j}"))?;
        }
    }
    Ok(format!("{} vision x {n_text} text pairs", row.len() - n_text))
}

fn param_accounting(_: &VerifyOptions) -> Result<String> {
    let base = DitConfig { expert_adaln: false, expert_mlp: false, ..DitConfig::default() };
    let (single, ps_single) = Dit::new(base.clone(), 0)?;
    let (expert, ps_expert) = Dit::new(DitConfig { expert_adaln: true, ..base.clone() }, 0)?;
    ensure(expert.modulation_params() == 2 * single.modulation_params(), || "modulation not doubled".into())?;
    ensure(expert.attention_mlp_params() == single.attention_mlp_params(), || "attention/MLP parameters changed".into())?;
    let delta = ps_expert.numel() - ps_single.numel();
    let want = base.layers * 6 * base.d_model * (base.d_model + 1);
    ensure(delta == want, || format!("delta {delta}, expected {want}"))?;
    Ok(format!("expert AdaLN adds {delta} parameters"))
}

// ---- diffusion ----

fn schedule_decreasing(_: &VerifyOptions) -> Result<String> {
    for t_diff in [2, 50, 1000] {
        let s = NoiseSchedule::new(t_diff)?;
        ensure((1..t_diff).all(|t| s.a(t) > s.a(t + 1)), || format!("T={t_diff} not strictly decreasing"))?;
    }
    Ok("T = 2, 50, 1000".into())
}

fn schedule_zero_terminal(_: &VerifyOptions) -> Result<String> {
    for t_diff in [2, 50, 1000] {
        let s = NoiseSchedule::new(t_diff)?;
        ensure(s.a(t_diff) == 0.0, || format!("a_T = {:e}", s.a(t_diff)))?;
    }
    Ok("a_T == 0".into())
}

fn schedule_first(_: &VerifyOptions) -> Result<String> {
    let s = NoiseSchedule::new(1000)?;
    let d = (s.a(1) - s.a_raw[0]).abs();
    ensure(d <= 1e-12, || format!("|Δa_1| {d:e}"))?;
    Ok(format!("|Δa_1| {d:.1e}"))
}

fn schedule_unit(_: &VerifyOptions) -> Result<String> {
    let s = NoiseSchedule::new(1000)?;
    let worst = (1..=1000).map(|t| (s.a(t).powi(2) + s.s(t).powi(2) - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("max |a²+s²-1| {worst:e}"))?;
    Ok(format!("max |a²+s²-1| {worst:.1e}"))
}

fn intervals(_: &VerifyOptions) -> Result<String> {
    for (t_diff, n) in [(1000, 8), (1000, 3), (10, 10), (7, 2), (1000, 1)] {
        let p = SamplerPartition::new(t_diff, n)?;
        let mut next = 1;
        let (mut lo_size, mut hi_size) = (usize::MAX, 0);
        for &(a, b) in &p.intervals {
            ensure(a == next && b >= a, || format!("T={t_diff} n={n}: ({a},{b})"))?;
            next = b + 1;
            lo_size = lo_size.min(b - a + 1);
            hi_size = hi_size.max(b - a + 1);
        }
        ensure(next == t_diff + 1 && hi_size - lo_size <= 1, || format!("T={t_diff} n={n} sizes {lo_size}..{hi_size}"))?;
    }
    Ok("5 partitions".into())
}

fn v_identities(_: &VerifyOptions) -> Result<String> {
    let s = NoiseSchedule::new(1000)?;
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let t = rng.int_inclusive(1, 1000) as usize;
        let (a, sg) = (s.a(t), s.s(t));
        let x0: Tensor<f32> = rng.normal_tensor(&[2, 2, 2, 4], 1.0);
        let eps: Tensor<f32> = rng.normal_tensor(&[2, 2, 2, 4], 1.0);
        let z = noised(&x0, &eps, a, sg)?;
        let v = velocity(&x0, &eps, a, sg)?;
        worst = worst.max(recover_x0(&z, &v, a, sg)?.max_abs_diff(&x0));
        worst = worst.max(recover_eps(&z, &v, a, sg)?.max_abs_diff(&eps));
    }
    ensure(worst <= 1e-5, || format!("max |Δ| {worst:e}"))?;
    Ok(format!("50 batches, max |Δ| {worst:.1e}"))
}

fn explicit_coverage(_: &VerifyOptions) -> Result<String> {
    let mut s = RankSamplers::new(1000, 8, TimestepSampling::Explicit, 3)?;
    for step in 0..1000 {
        let mut hit: Vec<usize> = s.step().into_iter().map(|t| s.partition.interval_of(t).ok_or_else(|| Error::invalid("timestep outside every interval"))).collect::<Result<_>>()?;
        hit.sort_unstable();
        ensure(hit == (0..8).collect::<Vec<_>>(), || format!("step {step} hit {hit:?}"))?;
    }
    Ok("1000 steps x 8 ranks".into())
}

fn explicit_uniform(_: &VerifyOptions) -> Result<String> {
    let mut s = RankSamplers::new(1000, 8, TimestepSampling::Explicit, 77)?;
    let all: Vec<usize> = (0..20_000).flat_map(|_| s.step()).collect();
    let p = uniformity_p_value(&all, 1000, 50)?;
    ensure(p > 0.01, || format!("p = {p:.4}"))?;
    Ok(format!("chi-square p = {p:.3}"))
}

fn explicit_variance(_: &VerifyOptions) -> Result<String> {
    let profiles: [(&str, fn(usize) -> f64); 3] = [
        ("linear", |t| t as f64 / 1000.0),
        ("sqrt", |t| (t as f64).sqrt()),
        ("decay", |t| (-(t as f64) / 300.0).exp()),
    ];
    let mut out = Vec::new();
    for (name, f) in profiles {
        let r = variance_experiment(f, 1000, 8, 10_000, 42)?;
        ensure(r.explicit_lower_99(), || format!("{name}: z = {:.2}", r.z))?;
        out.push(format!("{name} z={:.1}", r.z));
    }
    Ok(out.join(", "))
}

fn ddim_oracle(_: &VerifyOptions) -> Result<String> {
    let sched = NoiseSchedule::new(1000)?;
    let x0: Tensor<f32> = Rng::new(8).normal_tensor(&[3, 2, 2, 4], 1.0);
    let oracle = OraclePredictor { x0: &x0, schedule: &sched };
    let mut worst = 0.0f64;
    for steps in [1, 10, 50, 1000] {
        let out = ddim_sample(&oracle, &sched, x0.shape(), &[], &SampleOptions { steps, guidance: None }, &mut Rng::new(9))?;
        worst = worst.max(out.max_abs_diff(&x0));
    }
    ensure(worst <= 1e-4, || format!("max |Δ| {worst:e}"))?;
    Ok(format!("steps 1, 10, 50, 1000: max |Δ| {worst:.1e}"))
}

// ---- framepack ----

fn random_descs(rng: &mut Rng, min: usize, spread: usize) -> Vec<ExampleDesc> {
    let n = min + rng.below(spread);
    (0..n)
        .map(|_| ExampleDesc { text_len: rng.below(5), grid: [[1, 2, 3, 5][rng.below(4)], [2, 4][rng.below(2)], 4] })
        .collect()
}

fn pack_fits(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let req = PackRequest { examples: random_descs(&mut rng, 1, 10), capacity: 32, patch: 2 };
        let b = pack(&req)?;
        for (r, row) in b.rows.iter().enumerate() {
            let used: usize = row.examples.iter().map(|&e| req.examples[e].len(2)).sum::<Result<usize>>()?;
            ensure(used == row.used && used <= req.capacity, || format!("row {r} uses {used}"))?;
        }
    }
    let too_big = PackRequest { examples: vec![ExampleDesc { text_len: 4, grid: [9, 4, 4] }], capacity: 32, patch: 2 };
    ensure(pack(&too_big).is_err(), || "oversized example accepted".into())?;
    Ok("100 random packs".into())
}

fn pack_isolation(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(2);
    for _ in 0..30 {
        let b = pack(&PackRequest { examples: random_descs(&mut rng, 1, 6), capacity: 40, patch: 2 })?;
        for row in b.all_rows()? {
            let m = build_mask(&row);
            let l = row.len();
            for i in 0..l {
                for j in 0..l {
                    let visible = m.data()[i * l + j] == 0.0;
                    let allowed = matches!((row[i], row[j]), (Some(a), Some(b)) if a.example == b.example);
                    ensure(visible == allowed, || format!("mask ({i},{j}) visible={visible}"))?;
                }
            }
        }
    }
    Ok("30 packs".into())
}

fn pack_contiguous(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let descs = random_descs(&mut rng, 1, 10);
        let b = pack(&PackRequest { examples: descs.clone(), capacity: 32, patch: 2 })?;
        let mut rows_of = vec![0usize; descs.len()];
        for r in 0..b.rows.len() {
            let row = b.row_tokens(r)?;
            let ids: Vec<usize> = row.iter().flatten().map(|t| t.example).collect();
            let mut runs: Vec<usize> = ids.clone();
            runs.dedup();
            for &e in &runs {
                rows_of[e] += 1;
            }
            let mut uniq = runs.clone();
            uniq.sort_unstable();
            uniq.dedup();
            ensure(uniq.len() == runs.len(), || format!("row {r} splits an example"))?;
            ensure(row.iter().skip(ids.len()).all(Option::is_none), || format!("row {r} has padding between examples"))?;
        }
        ensure(rows_of.iter().all(|&c| c == 1), || format!("row counts {rows_of:?}"))?;
    }
    Ok("50 packs".into())
}

fn pack_equivalence(_: &VerifyOptions) -> Result<String> {
    let cfg = DitConfig::tiny();
    let (dit, mut ps) = Dit::new(cfg.clone(), 21)?;
    jitter(&mut ps, 22, 0.05);
    let mut rng = Rng::new(23);
    let p = cfg.patch;
    let example_loss = |g: &mut Graph<f32>, out: Var, row: &[Option<Token>], exs: &[DitExample<f32>], targets: &[Tensor<f32>], e: usize| -> Result<f64> {
        let target = row_target(&dit.cfg, row, targets)?;
        let mut w = loss_weights(row, exs, p)?;
        for (wi, t) in w.iter_mut().zip(row) {
            if t.is_none_or(|t| t.example != e) {
                *wi = 0.0;
            }
        }
        let l = weighted_token_mse(g, out, &target, &w)?;
        Ok(g.scalar_value(l) as f64)
    };
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let exs: Vec<DitExample<f32>> = random_descs(&mut rng, 2, 3)
            .into_iter()
            .map(|d| {
                let [t, h, w] = d.grid;
                Ok(DitExample {
                    latent: rng.normal_tensor(&[t, h, w, cfg.latent_channels], 1.0),
                    text: text::caption_tokens(rng.below(6), rng.below(3), rng.below(5))?,
                    timestep: rng.int_inclusive(1, 1000) as f64,
                })
            })
            .collect::<Result<_>>()?;
        let targets: Vec<Tensor<f32>> = exs.iter().map(|e| rng.normal_tensor(e.latent.shape(), 1.0)).collect();
        let batch = pack(&PackRequest { examples: exs.iter().map(ExampleDesc::of).collect(), capacity: 40, patch: p })?;
        for r in 0..batch.rows.len() {
            let row = batch.row_tokens(r)?;
            let mut g = Graph::new();
            let out = dit.forward_row(&mut g, &ps, &row, &exs, None)?.out;
            for &e in &batch.rows[r].examples {
                let packed = dit.predict(&mut g, out, &row, &exs, e)?;
                let packed = g.value(packed).clone();
                let packed_loss = example_loss(&mut g, out, &row, &exs, &targets, e)?;
                let one = std::slice::from_ref(&exs[e]);
                let srow = single_row(&exs[e], p)?;
                let mut gs = Graph::new();
                let sout = dit.forward_row(&mut gs, &ps, &srow, one, None)?.out;
                let alone = dit.predict(&mut gs, sout, &srow, one, 0)?;
                let alone = gs.value(alone).clone();
                let alone_loss = example_loss(&mut gs, sout, &srow, one, std::slice::from_ref(&targets[e]), 0)?;
                worst = worst.max(packed.max_abs_diff(&alone) as f64).max((packed_loss - alone_loss).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max |Δ| {worst:e}"))?;
    Ok(format!("10 packs, max |Δ| {worst:.1e}"))
}

fn pack_ffd(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(31);
    let (mut ffd_rows, mut ff_rows) = (0, 0);
    for _ in 0..200 {
        let descs = random_descs(&mut rng, 1, 12);
        let req = PackRequest { examples: descs.clone(), capacity: 32, patch: 2 };
        let ffd = pack(&req)?;
        ensure(ffd.rows.len() <= descs.len(), || "more rows than examples".into())?;
        ffd_rows += ffd.rows.len();
        ff_rows += pack_first_fit(&req)?.rows.len();
    }
    // identical token totals: fewer rows is less waste
    ensure(ffd_rows <= ff_rows, || format!("FFD {ffd_rows} rows vs first fit {ff_rows}"))?;
    Ok(format!("200 packs: FFD {ffd_rows} rows, first fit {ff_rows}"))
}

fn pack_joint(_: &VerifyOptions) -> Result<String> {
    let descs = vec![
        ExampleDesc { text_len: 4, grid: [1, 4, 4] },
        ExampleDesc { text_len: 4, grid: [5, 4, 4] },
        ExampleDesc { text_len: 4, grid: [1, 4, 4] },
    ];
    let b = pack(&PackRequest { examples: descs, capacity: 40, patch: 2 })?;
    ensure(b.rows.len() == 1, || format!("{} rows", b.rows.len()))?;
    Ok("two images and a video in one row".into())
}

// ---- harness ----

fn data_captions(_: &VerifyOptions) -> Result<String> {
    let spec = SynthSpec { num_clips: 60, frames: 1, size: 32, seed: 3 };
    for c in generate(&spec)? {
        let toks = c.meta.caption();
        ensure(toks == text::caption_tokens(c.meta.color, c.meta.shape, c.meta.motion)?, || "caption mismatch".into())?;
        ensure(text::describe(&toks) == format!("<bos> {}", c.meta.describe()), || format!("clip {} decodes differently", c.meta.index))?;
    }
    Ok("60 clips".into())
}

fn data_regeneration(_: &VerifyOptions) -> Result<String> {
    let spec = SynthSpec { num_clips: 6, frames: 5, size: 32, seed: 11 };
    let a = generate(&spec)?;
    let b = generate(&spec)?;
    for (x, y) in a.iter().zip(&b) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(x.meta == y.meta && bits(&x.video) == bits(&y.video), || format!("clip {} differs", x.meta.index))?;
    }
    Ok("6 clips bit-identical".into())
}

fn tiny_vae_for(cfg: &RunConfig) -> Result<(Vae, ParamStore<f32>)> {
    Vae::new(cfg.vae.clone(), cfg.seed)
}

fn stages_order(_: &VerifyOptions) -> Result<String> {
    let mut cfg = RunConfig::tiny();
    let (vae, vp) = tiny_vae_for(&cfg)?;
    let mut first = cfg.clone();
    first.progressive.stages.truncate(1);
    let solo = train_progressive(&first, &vae, &vp, None, None, |_, _| Ok(true))?;
    cfg.progressive.stages[1].steps = 0;
    cfg.progressive.stages.truncate(2);
    let both = train_progressive(&cfg, &vae, &vp, None, None, |_, _| Ok(true))?;
    let names: Vec<&str> = both.stages.iter().map(|s| s.name.as_str()).collect();
    ensure(names == ["low_res", "high_res"], || format!("stage order {names:?}"))?;
    let same = solo.params.iter().zip(both.params.iter()).all(|((_, a), (_, b))| a == b);
    ensure(same, || "an empty second stage did not keep the first stage's weights".into())?;
    Ok("declared order; zero-step stage keeps warm-started weights".into())
}

fn checkpoint_round_trip(_: &VerifyOptions) -> Result<String> {
    let mut rng = Rng::new(4);
    let mut c = Checkpoint::new();
    c.push("a", rng.normal_tensor(&[3, 4], 1.0));
    c.push("b.c", Tensor::new(&[1], vec![f32::from_bits(0x7fc0_0001)])?);
    c.put_u64("n", u64::MAX - 3);
    c.put_rng("r", &rng);
    let bytes = c.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    ensure(back.to_bytes()? == bytes, || "re-encoding differs".into())?;
    ensure(back.get_u64("n")? == u64::MAX - 3, || "u64 changed".into())?;
    Ok(format!("{} bytes", bytes.len()))
}

fn checkpoint_crc(_: &VerifyOptions) -> Result<String> {
    let mut c = Checkpoint::new();
    c.push("w", Rng::new(5).normal_tensor(&[8], 1.0));
    let bytes = c.to_bytes()?;
    for i in [0, 9, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        ensure(Checkpoint::from_bytes(&bad).is_err(), || format!("flip at byte {i} accepted"))?;
    }
    Ok("4 single-bit corruptions rejected".into())
}

fn progressive_resume(_: &VerifyOptions) -> Result<String> {
    let cfg = RunConfig::tiny();
    let (vae, vp) = tiny_vae_for(&cfg)?;
    let mut full = Vec::new();
    train_progressive(&cfg, &vae, &vp, None, None, |s, r| {
        full.push((s, r.loss.to_bits()));
        Ok(true)
    })?;
    // stop in the middle of the second stage, then resume from bytes
    let mut seen = Vec::new();
    let stop_at = cfg.progressive.stages[0].steps + 1;
    let first = train_progressive(&cfg, &vae, &vp, None, None, |s, r| {
        seen.push((s, r.loss.to_bits()));
        Ok(seen.len() < stop_at)
    })?;
    ensure(!first.completed, || "run did not stop".into())?;
    let ck = Checkpoint::from_bytes(&first.checkpoint.to_bytes()?)?;
    train_progressive(&cfg, &vae, &vp, None, Some(&ck), |s, r| {
        seen.push((s, r.loss.to_bits()));
        Ok(true)
    })?;
    ensure(seen == full, || format!("resumed sequence differs ({} vs {} steps)", seen.len(), full.len()))?;
    Ok(format!("{} steps, interrupted after {stop_at}", full.len()))
}

fn logit_delta(mode: PositionMode) -> Result<f64> {
    let old = DitConfig::tiny();
    let (_, ps) = Dit::new(old.clone(), 3)?;
    let new = DitConfig { rope_coord_scale: coord_scale(mode, 32, 64), ..old.clone() };
    resolution_logit_delta(&old, &new, &ps, [2, 4, 4], 1)
}

fn rope_extrapolation(_: &VerifyOptions) -> Result<String> {
    let d = logit_delta(PositionMode::Extrapolate)?;
    ensure(d <= 1e-6, || format!("max |Δ| {d:e}"))?;
    Ok(format!("max |Δ| {d:.1e}"))
}

fn rope_interpolation(_: &VerifyOptions) -> Result<String> {
    let d = logit_delta(PositionMode::Interpolate)?;
    ensure(d > 0.0, || "logits unchanged".into())?;
    Ok(format!("max |Δ| {d:.2e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_namespaced() {
        let cs = checks();
        let mut ids: Vec<&str> = cs.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), cs.len());
        let modules = ["numerics.", "vae3d.", "ctxpar.", "dit.", "diffusion.", "framepack.", "harness."];
        assert!(cs.iter().all(|c| modules.iter().any(|m| c.id.starts_with(m))));
    }

    #[test]
    fn filters_select_by_prefix() {
        let r = run_verify(&VerifyOptions::default(), &["diffusion.schedule".into()], |_| {});
        assert_eq!(r.results.len(), 4);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn non_causal_padding_is_caught() {
        let opts = VerifyOptions { fault: Fault::NonCausalPadding };
        let r = run_verify(&opts, &["numerics.conv.causality".into(), "vae3d.".into()], |_| {});
        for id in ["numerics.conv.causality", "vae3d.encoder.causality", "vae3d.decoder.causality", "vae3d.image_no_future"] {
            assert!(!r.get(id).unwrap().passed, "{id} passed under the fault");
        }
    }
}
