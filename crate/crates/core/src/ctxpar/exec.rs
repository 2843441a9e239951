//! Rank execution: each rank runs the ordinary model code on its chunk with
//! a [`RankContext`] installed, which swaps causal zero padding for halo
//! frames received from the previous rank.

use std::sync::Arc;

use super::bus::{Bus, HaloMsg, LayerStat, MessageLog, ABORTED};
use super::plan::{split, split_latent, RankPlan};
use crate::error::{Error, Result};
use crate::numerics::{Front, Graph, ParamStore, TemporalContext, TemporalWindow, Tensor};
use crate::vae3d::{LatentDist, Vae};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    /// Ranks run one after another in rank order.
    #[default]
    Sequential,
    /// One OS thread per rank; receives block until the halo arrives.
    Threaded,
}

/// Temporal context of one rank.
pub struct RankContext {
    rank: usize,
    bus: Arc<Bus>,
    frame_start: usize,
    next_layer: usize,
}

impl RankContext {
    pub fn new(rank: usize, frame_start: usize, bus: Arc<Bus>) -> Self {
        Self {
            rank,
            bus,
            frame_start,
            next_layer: 0,
        }
    }
}

/// Last `k` frames of the virtual stream `front ++ input`.
fn stream_tail(front: &Front<f32>, input: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let n = input.shape()[0];
    if n >= k {
        return input.slice_outer(n - k, n);
    }
    let from_front = k - n;
    let head = match front {
        Front::Zeros(_) => {
            let mut shape = input.shape().to_vec();
            shape[0] = from_front;
            Tensor::zeros(&shape)
        }
        Front::Frames(f) => {
            let m = f.shape()[0];
            f.slice_outer(m - from_front, m)?
        }
    };
    Tensor::concat_outer(&[&head, input])
}

impl TemporalContext<f32> for RankContext {
    fn conv_window(&mut self, input: &Tensor<f32>, kt: usize, stride_t: usize) -> Result<TemporalWindow<f32>> {
        let layer_id = self.next_layer;
        self.next_layer += 1;
        let s = input.shape();
        self.bus.record_layer(LayerStat {
            rank: self.rank,
            layer_id,
            kt,
            input: [s[0], s[1], s[2], s[3]],
        });
        let halo = kt - 1;
        let front = if halo == 0 {
            Front::Zeros(0)
        } else if self.rank == 0 {
            if self.frame_start != 0 {
                return Err(Error::Protocol("rank 0 must start at frame 0".into()));
            }
            Front::Zeros(halo)
        } else {
            Front::Frames(self.bus.recv(self.rank, layer_id, halo)?.payload)
        };
        if halo > 0 && self.rank + 1 < self.bus.ranks() {
            let payload = stream_tail(&front, input, halo)?;
            self.bus.send(HaloMsg {
                from_rank: self.rank,
                to_rank: self.rank + 1,
                layer_id,
                element_count: payload.len(),
                payload,
            })?;
        }
        let start = self.frame_start;
        let first = start.div_ceil(stride_t);
        let phase = first * stride_t - start;
        if phase >= s[0] {
            return Err(Error::invalid(format!(
                "rank {} chunk of {} frames at {start} yields no output at stride {stride_t}",
                self.rank, s[0]
            )));
        }
        self.frame_start = first;
        Ok(TemporalWindow {
            front,
            back: 0,
            phase,
        })
    }

    fn frame_start(&self) -> usize {
        self.frame_start
    }

    fn set_frame_start(&mut self, start: usize) {
        self.frame_start = start;
    }
}

/// Runs `body` once per rank with a fresh graph carrying that rank's
/// context. Results are returned in rank order.
pub fn run_ranks<T, B>(plan: &RankPlan, mode: ExecMode, body: B) -> Result<(Vec<T>, MessageLog)>
where
    T: Send,
    B: Fn(usize, &mut Graph<f32>) -> Result<T> + Sync,
{
    let bus = Arc::new(Bus::new(plan.ranks, mode == ExecMode::Threaded));
    let run_one = |rank: usize| -> Result<T> {
        let mut g = Graph::new();
        g.set_temporal_context(Box::new(RankContext::new(
            rank,
            plan.chunk_bounds[rank].0,
            bus.clone(),
        )));
        let out = body(rank, &mut g);
        if out.is_err() {
            bus.abort();
        }
        out
    };
    let outs: Vec<T> = match mode {
        ExecMode::Sequential => (0..plan.ranks).map(run_one).collect::<Result<_>>()?,
        ExecMode::Threaded => std::thread::scope(|sc| {
            let handles: Vec<_> = (0..plan.ranks).map(|r| sc.spawn(move || run_one(r))).collect();
            let results: Vec<Result<T>> = handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("rank panicked".into()))))
                .collect();
            // Prefer the root cause over the aborts it triggered.
            let is_abort = |e: &Error| matches!(e, Error::Protocol(m) if m == ABORTED);
            let mut errors: Vec<Error> = Vec::new();
            let mut outs = Vec::new();
            for r in results {
                match r {
                    Ok(v) => outs.push(v),
                    Err(e) => errors.push(e),
                }
            }
            match errors.iter().position(|e| !is_abort(e)) {
                Some(i) => Err(errors.swap_remove(i)),
                None => match errors.pop() {
                    Some(e) => Err(e),
                    None => Ok(outs),
                },
            }
        })?,
    };
    let bus = Arc::try_unwrap(bus).map_err(|_| Error::Protocol("bus still shared".into()))?;
    Ok((outs, bus.finish()?))
}

fn concat_time(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::concat_outer(&refs)
}

/// Applies one causal conv layer to pre-split chunks.
pub fn causal_conv_parallel(
    chunks: &[Tensor<f32>],
    plan: &RankPlan,
    kernel: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    stride: (usize, usize, usize),
    mode: ExecMode,
) -> Result<(Vec<Tensor<f32>>, MessageLog)> {
    if chunks.len() != plan.ranks {
        return Err(Error::invalid("one chunk per rank required"));
    }
    run_ranks(plan, mode, |rank, g| {
        let x = g.constant(chunks[rank].clone());
        let w = g.constant(kernel.clone());
        let b = bias.map(|b| g.constant(b.clone()));
        let y = g.conv3d(x, w, b, stride)?;
        Ok(g.value(y).clone())
    })
}

/// Output of [`encode_parallel`].
#[derive(Clone, Debug)]
pub struct ParallelEncode {
    pub plan: RankPlan,
    pub dist: LatentDist,
    pub log: MessageLog,
}

/// Full encoder over `ranks` temporal shards.
pub fn encode_parallel(
    vae: &Vae,
    ps: &ParamStore<f32>,
    video: &Tensor<f32>,
    ranks: usize,
    mode: ExecMode,
) -> Result<ParallelEncode> {
    let plan = split(video.shape()[0], ranks)?;
    let chunks = plan.chunks(video)?;
    let (outs, log) = run_ranks(&plan, mode, |rank, g| {
        let v = g.constant(chunks[rank].clone());
        let (m, lv) = vae.encode(g, ps, v)?;
        Ok((g.value(m).clone(), g.value(lv).clone()))
    })?;
    let (means, logvars): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
    Ok(ParallelEncode {
        plan,
        dist: LatentDist {
            mean: concat_time(&means)?,
            logvar: concat_time(&logvars)?,
        },
        log,
    })
}

/// Decoder over `ranks` latent shards, using the same halo rule. The
/// decoder has no strided temporal layers, so any split works.
pub fn decode_parallel(
    vae: &Vae,
    ps: &ParamStore<f32>,
    latent: &Tensor<f32>,
    ranks: usize,
    mode: ExecMode,
) -> Result<(Tensor<f32>, MessageLog)> {
    let plan = split_latent(latent.shape()[0], ranks)?;
    let chunks = plan.chunks(latent)?;
    let (outs, log) = run_ranks(&plan, mode, |rank, g| {
        let z = g.constant(chunks[rank].clone());
        let y = vae.decode(g, ps, z)?;
        Ok(g.value(y).clone())
    })?;
    Ok((concat_time(&outs)?, log))
}

/// Halo traffic of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerComm {
    pub layer_id: usize,
    pub kt: usize,
    pub messages: usize,
    pub elements: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommReport {
    pub ranks: usize,
    pub layers: Vec<LayerComm>,
    pub total_elements: usize,
    pub total_bytes: usize,
    /// Elements of every conv layer input, summed over ranks.
    pub activation_elements: usize,
    pub ratio: f64,
}

impl std::fmt::Display for CommReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "layer,kt,messages,elements,bytes")?;
        for l in &self.layers {
            writeln!(f, "{},{},{},{},{}", l.layer_id, l.kt, l.messages, l.elements, l.bytes)?;
        }
        write!(
            f,
            "total: {} elements ({} bytes) over {} ranks; activation volume {}; ratio {:.6}",
            self.total_elements, self.total_bytes, self.ranks, self.activation_elements, self.ratio
        )
    }
}

/// Aggregates a message log per layer.
pub fn comm_report(log: &MessageLog) -> CommReport {
    let mut layers: Vec<LayerComm> = Vec::new();
    let mut activation = 0;
    for stat in &log.layers {
        activation += stat.input.iter().product::<usize>();
        if layers.last().is_none_or(|l| l.layer_id != stat.layer_id) {
            layers.push(LayerComm {
                layer_id: stat.layer_id,
                kt: stat.kt,
                messages: 0,
                elements: 0,
                bytes: 0,
            });
        }
    }
    for m in &log.messages {
        if let Some(l) = layers.iter_mut().find(|l| l.layer_id == m.layer_id) {
            l.messages += 1;
            l.elements += m.element_count;
            l.bytes += 4 * m.element_count;
        }
    }
    let total_elements = layers.iter().map(|l| l.elements).sum();
    CommReport {
        ranks: log.ranks,
        total_bytes: 4 * total_elements,
        ratio: if activation == 0 {
            0.0
        } else {
            total_elements as f64 / activation as f64
        },
        layers,
        total_elements,
        activation_elements: activation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn serial_conv(x: &Tensor<f32>, k: &Tensor<f32>, stride: (usize, usize, usize)) -> Tensor<f32> {
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv3d(xv, kv, None, stride).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_layer_matches_serial() {
        let mut rng = Rng::new(1);
        let x = rng.uniform_tensor(&[17, 8, 8, 4], -1.0, 1.0);
        let k = rng.normal_tensor(&[3, 3, 3, 4, 5], 0.2);
        for stride in [(1, 1, 1), (2, 2, 2)] {
            let want = serial_conv(&x, &k, stride);
            for ranks in [1, 2, 4] {
                for mode in [ExecMode::Sequential, ExecMode::Threaded] {
                    let plan = split(17, ranks).unwrap();
                    let (outs, log) = causal_conv_parallel(&plan.chunks(&x).unwrap(), &plan, &k, None, stride, mode).unwrap();
                    assert_eq!(concat_time(&outs).unwrap(), want);
                    assert_eq!(log.messages.len(), ranks - 1);
                    assert!(log.messages.iter().all(|m| m.shape[0] == 2 && m.to_rank == m.from_rank + 1));
                }
            }
        }
    }

    #[test]
    fn halo_volume_for_two_ranks() {
        let x = Rng::new(2).uniform_tensor(&[17, 32, 32, 16], -1.0, 1.0);
        let k = Tensor::zeros(&[3, 3, 3, 16, 16]);
        let plan = split(17, 2).unwrap();
        let (_, log) = causal_conv_parallel(&plan.chunks(&x).unwrap(), &plan, &k, None, (1, 1, 1), ExecMode::Sequential).unwrap();
        assert_eq!(log.messages.len(), 1);
        assert_eq!(log.messages[0].element_count, 32768);
        assert_eq!(comm_report(&log).total_elements, 32768);
    }

    #[test]
    fn pointwise_layers_send_nothing() {
        let x = Rng::new(3).uniform_tensor(&[9, 4, 4, 2], -1.0, 1.0);
        let k = Rng::new(4).normal_tensor(&[1, 1, 1, 2, 2], 1.0);
        let plan = split(9, 2).unwrap();
        let (outs, log) = causal_conv_parallel(&plan.chunks(&x).unwrap(), &plan, &k, None, (1, 1, 1), ExecMode::Sequential).unwrap();
        assert_eq!(concat_time(&outs).unwrap(), serial_conv(&x, &k, (1, 1, 1)));
        assert_eq!(comm_report(&log).total_elements, 0);
    }

    #[test]
    fn single_rank_has_no_traffic() {
        let x = Rng::new(5).uniform_tensor(&[5, 4, 4, 2], -1.0, 1.0);
        let k = Rng::new(6).normal_tensor(&[3, 3, 3, 2, 2], 1.0);
        let plan = split(5, 1).unwrap();
        let (_, log) = causal_conv_parallel(&plan.chunks(&x).unwrap(), &plan, &k, None, (1, 1, 1), ExecMode::Sequential).unwrap();
        assert_eq!(comm_report(&log).total_elements, 0);
    }

    #[test]
    fn short_chunks_relay_through_halo() {
        // Rank 0 holds only the lone frame, shorter than the halo.
        let mut rng = Rng::new(7);
        let x = rng.uniform_tensor(&[9, 4, 4, 2], -1.0, 1.0);
        let k = rng.normal_tensor(&[5, 3, 3, 2, 3], 0.3);
        let plan = split(9, 3).unwrap();
        assert_eq!(plan.lengths(), vec![1, 4, 4]);
        let (outs, log) = causal_conv_parallel(&plan.chunks(&x).unwrap(), &plan, &k, None, (1, 1, 1), ExecMode::Sequential).unwrap();
        assert_eq!(concat_time(&outs).unwrap(), serial_conv(&x, &k, (1, 1, 1)));
        assert!(log.messages.iter().all(|m| m.shape[0] == 4));
    }
}
