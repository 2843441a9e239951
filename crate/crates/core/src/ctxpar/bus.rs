//! In-process ordered message bus for halo frames.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) const ABORTED: &str = "another rank failed";

/// Trailing `kt − 1` input frames sent from one rank to its successor.
#[derive(Clone, Debug)]
pub struct HaloMsg {
    pub from_rank: usize,
    pub to_rank: usize,
    pub layer_id: usize,
    pub payload: Tensor<f32>,
    pub element_count: usize,
}

/// What the log keeps of a delivered message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaloMeta {
    pub from_rank: usize,
    pub to_rank: usize,
    pub layer_id: usize,
    /// `(frames, H, W, C)` of the payload.
    pub shape: [usize; 4],
    pub element_count: usize,
}

/// One causal conv layer as seen by one rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerStat {
    pub rank: usize,
    pub layer_id: usize,
    pub kt: usize,
    /// Local input `(T, H, W, C)`.
    pub input: [usize; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MessageLog {
    pub ranks: usize,
    /// Sorted by `(layer_id, from_rank)`.
    pub messages: Vec<HaloMeta>,
    /// Sorted by `(layer_id, rank)`.
    pub layers: Vec<LayerStat>,
}

#[derive(Default)]
struct State {
    /// FIFO per sender.
    queues: HashMap<usize, VecDeque<HaloMsg>>,
    aborted: bool,
    log: Vec<HaloMeta>,
    layers: Vec<LayerStat>,
}

/// Per-sender FIFO channels. In blocking mode a receive waits for the
/// message (threaded ranks); otherwise a missing message is an error
/// (ranks run one after another in rank order).
pub struct Bus {
    ranks: usize,
    blocking: bool,
    timeout: Duration,
    state: Mutex<State>,
    ready: Condvar,
}

impl Bus {
    pub fn new(ranks: usize, blocking: bool) -> Self {
        Self {
            ranks,
            blocking,
            timeout: Duration::from_secs(120),
            state: Mutex::new(State::default()),
            ready: Condvar::new(),
        }
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    /// Queues a halo. Only forward messages `r → r+1` are legal.
    pub fn send(&self, msg: HaloMsg) -> Result<()> {
        if msg.to_rank != msg.from_rank + 1 || msg.to_rank >= self.ranks {
            return Err(Error::Protocol(format!(
                "illegal halo direction {} -> {}",
                msg.from_rank, msg.to_rank
            )));
        }
        if msg.element_count != msg.payload.len() {
            return Err(Error::Protocol("element count does not match payload".into()));
        }
        let s = msg.payload.shape();
        let meta = HaloMeta {
            from_rank: msg.from_rank,
            to_rank: msg.to_rank,
            layer_id: msg.layer_id,
            shape: [s[0], s[1], s[2], s[3]],
            element_count: msg.element_count,
        };
        let mut st = self.state.lock().expect("bus lock");
        st.log.push(meta);
        st.queues.entry(msg.from_rank).or_default().push_back(msg);
        self.ready.notify_all();
        Ok(())
    }

    /// Receives the halo for `layer_id` from `to_rank − 1`, checking
    /// ordering and length.
    pub fn recv(&self, to_rank: usize, layer_id: usize, frames: usize) -> Result<HaloMsg> {
        if to_rank == 0 {
            return Err(Error::Protocol("rank 0 has no predecessor".into()));
        }
        let from = to_rank - 1;
        let mut st = self.state.lock().expect("bus lock");
        loop {
            if let Some(msg) = st.queues.get_mut(&from).and_then(|q| q.pop_front()) {
                if msg.layer_id != layer_id {
                    return Err(Error::Protocol(format!(
                        "rank {to_rank} expected layer {layer_id}, got layer {} from rank {from}",
                        msg.layer_id
                    )));
                }
                if msg.payload.shape()[0] != frames {
                    return Err(Error::Protocol(format!(
                        "halo for layer {layer_id} has {} frames, expected {frames}",
                        msg.payload.shape()[0]
                    )));
                }
                return Ok(msg);
            }
            if st.aborted {
                return Err(Error::Protocol(ABORTED.into()));
            }
            if !self.blocking {
                return Err(Error::Protocol(format!(
                    "missing halo for layer {layer_id} at rank {to_rank}"
                )));
            }
            let (guard, timeout) = self.ready.wait_timeout(st, self.timeout).expect("bus lock");
            st = guard;
            if timeout.timed_out() {
                return Err(Error::Protocol(format!(
                    "timed out waiting for layer {layer_id} halo at rank {to_rank}"
                )));
            }
        }
    }

    /// Wakes blocked receivers with an error after a rank fails.
    pub fn abort(&self) {
        self.state.lock().expect("bus lock").aborted = true;
        self.ready.notify_all();
    }

    pub(crate) fn record_layer(&self, stat: LayerStat) {
        self.state.lock().expect("bus lock").layers.push(stat);
    }

    /// Final log; fails if any sent halo was never consumed.
    pub fn finish(self) -> Result<MessageLog> {
        let st = self.state.into_inner().expect("bus lock");
        if let Some((from, q)) = st.queues.iter().find(|(_, q)| !q.is_empty()) {
            return Err(Error::Protocol(format!(
                "{} undelivered halo(s) from rank {from}",
                q.len()
            )));
        }
        let mut messages = st.log;
        messages.sort_by_key(|m| (m.layer_id, m.from_rank));
        let mut layers = st.layers;
        layers.sort_by_key(|l| (l.layer_id, l.rank));
        Ok(MessageLog {
            ranks: self.ranks,
            messages,
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(from: usize, to: usize, layer: usize, frames: usize) -> HaloMsg {
        let payload = Tensor::zeros(&[frames, 1, 1, 1]);
        HaloMsg {
            from_rank: from,
            to_rank: to,
            layer_id: layer,
            element_count: payload.len(),
            payload,
        }
    }

    #[test]
    fn backward_message_is_rejected() {
        let bus = Bus::new(3, false);
        assert!(matches!(bus.send(msg(1, 0, 0, 2)), Err(Error::Protocol(_))));
        assert!(matches!(bus.send(msg(0, 2, 0, 2)), Err(Error::Protocol(_))));
    }

    #[test]
    fn protocol_violations() {
        let bus = Bus::new(2, false);
        assert!(matches!(bus.recv(1, 0, 2), Err(Error::Protocol(_))));
        bus.send(msg(0, 1, 1, 2)).unwrap();
        assert!(matches!(bus.recv(1, 0, 2), Err(Error::Protocol(_))));
        bus.send(msg(0, 1, 0, 1)).unwrap();
        assert!(matches!(bus.recv(1, 0, 2), Err(Error::Protocol(_))));
        let bus = Bus::new(2, false);
        bus.send(msg(0, 1, 0, 2)).unwrap();
        assert!(bus.finish().is_err());
    }
}
