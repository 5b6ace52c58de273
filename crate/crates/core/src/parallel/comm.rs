//! Blocking collectives between simulated workers.
//!
//! Every collective is an all-gather of one [`Message`] per worker; reductions
//! are then computed locally by each worker in worker-index order, so all
//! workers obtain bitwise identical results without a coordinator.

use std::sync::{Arc, Barrier, Mutex, PoisonError};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Frozen,
}

/// Identifies the collective a worker believes it is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tag {
    pub step: u64,
    pub phase: Phase,
}

/// Sign bits of a tensor, packed little-endian within each byte.
/// Bit set means the element was negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignBits {
    bits: Vec<u8>,
    len: usize,
}

impl SignBits {
    pub fn from_values(values: &[f64]) -> Self {
        let mut bits = vec![0u8; values.len().div_ceil(8)];
        for (i, &v) in values.iter().enumerate() {
            // sign(0) = +1
            if v < 0.0 {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        Self {
            bits,
            len: values.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    /// `+1.0` or `-1.0` for element `i`.
    pub fn sign(&self, i: usize) -> f64 {
        if self.bits[i / 8] >> (i % 8) & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn scaled(&self, scale: f64) -> Vec<f64> {
        (0..self.len).map(|i| scale * self.sign(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Tensor),
    Compressed {
        signs: SignBits,
        scale: f64,
    },
    /// Sent by a worker that failed locally so its peers do not block.
    Abort(String),
}

impl Payload {
    /// Wire size: FP64 per dense element; one bit per element plus one FP64
    /// scale when compressed.
    pub fn bits(&self) -> u64 {
        match self {
            Payload::Dense(t) => 64 * t.numel() as u64,
            Payload::Compressed { signs, .. } => signs.len() as u64 + 64,
            Payload::Abort(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub tag: Tag,
    /// Relative weight of this worker's contribution (its shard size).
    pub weight: f64,
    pub payload: Payload,
}

pub trait Collective: Send {
    fn world_size(&self) -> usize;
    fn rank(&self) -> usize;

    /// Blocks until every worker has contributed; returns all messages in
    /// worker order.
    fn all_gather(&mut self, msg: Message) -> Result<Vec<Message>>;

    /// Releases peers blocked in a collective after a local failure.
    fn abort(&mut self, tag: Tag, reason: &str) {
        let _ = self.all_gather(Message {
            tag,
            weight: 0.0,
            payload: Payload::Abort(reason.to_string()),
        });
    }
}

/// Single-worker collective.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalComm;

impl Collective for LocalComm {
    fn world_size(&self) -> usize {
        1
    }

    fn rank(&self) -> usize {
        0
    }

    fn all_gather(&mut self, msg: Message) -> Result<Vec<Message>> {
        Ok(vec![msg])
    }
}

#[derive(Debug)]
struct Shared {
    barrier: Barrier,
    slots: Mutex<Vec<Option<Message>>>,
}

/// One endpoint of an in-process group; move each into its worker thread.
#[derive(Debug, Clone)]
pub struct ThreadComm {
    rank: usize,
    world: usize,
    shared: Arc<Shared>,
}

pub fn thread_group(k: usize) -> Vec<ThreadComm> {
    let shared = Arc::new(Shared {
        barrier: Barrier::new(k),
        slots: Mutex::new(vec![None; k]),
    });
    (0..k)
        .map(|rank| ThreadComm {
            rank,
            world: k,
            shared: Arc::clone(&shared),
        })
        .collect()
}

impl Collective for ThreadComm {
    fn world_size(&self) -> usize {
        self.world
    }

    fn rank(&self) -> usize {
        self.rank
    }

    fn all_gather(&mut self, msg: Message) -> Result<Vec<Message>> {
        self.shared
            .slots
            .lock()
            .unwrap_or_else(PoisonError::into_inner)[self.rank] = Some(msg);
        self.shared.barrier.wait();
        let all: Vec<Message> = self
            .shared
            .slots
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .iter()
            .map(|m| m.clone().expect("every worker deposits before the barrier"))
            .collect();
        // nobody may overwrite a slot until everyone has read it
        self.shared.barrier.wait();
        Ok(all)
    }
}

/// Fails with a protocol error unless every message carries `tag` and no
/// worker aborted.
pub fn check_messages(tag: Tag, msgs: &[Message]) -> Result<()> {
    for (rank, m) in msgs.iter().enumerate() {
        if let Payload::Abort(reason) = &m.payload {
            return Err(Error::Protocol(format!("worker {rank} aborted: {reason}")));
        }
        if m.tag != tag {
            return Err(Error::Protocol(format!(
                "worker {rank} is at step {} ({:?}), expected step {} ({:?})",
                m.tag.step, m.tag.phase, tag.step, tag.phase
            )));
        }
        if !(m.weight.is_finite() && m.weight > 0.0) {
            return Err(Error::Protocol(format!(
                "worker {rank} sent weight {}",
                m.weight
            )));
        }
    }
    Ok(())
}

/// Decodes a gathered payload to dense values.
pub fn payload_values(msg: &Message, numel: usize) -> Result<Vec<f64>> {
    let values = match &msg.payload {
        Payload::Dense(t) => t.data().to_vec(),
        Payload::Compressed { signs, scale } => signs.scaled(*scale),
        Payload::Abort(r) => return Err(Error::Protocol(format!("aborted: {r}"))),
    };
    if values.len() != numel {
        return Err(Error::Protocol(format!(
            "payload of {} elements, expected {numel}",
            values.len()
        )));
    }
    Ok(values)
}

/// `Σ wᵢ·xᵢ / Σ wᵢ`, accumulated in worker order. A single worker gets its
/// own values back unchanged.
pub fn weighted_mean(msgs: &[Message], shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if let [only] = msgs {
        return Tensor::new(shape.to_vec(), payload_values(only, numel)?);
    }
    let mut acc = vec![0.0; numel];
    let mut total = 0.0;
    for m in msgs {
        let vals = payload_values(m, numel)?;
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += m.weight * v;
        }
        total += m.weight;
    }
    for a in &mut acc {
        *a /= total;
    }
    Tensor::new(shape.to_vec(), acc)
}

/// Dense weighted all-reduce of `t` over the group.
pub fn allreduce_weighted(
    comm: &mut dyn Collective,
    tag: Tag,
    t: &Tensor,
    weight: f64,
) -> Result<Tensor> {
    let msgs = comm.all_gather(Message {
        tag,
        weight,
        payload: Payload::Dense(t.clone()),
    })?;
    check_messages(tag, &msgs)?;
    for (rank, m) in msgs.iter().enumerate() {
        if let Payload::Dense(x) = &m.payload {
            if x.shape() != t.shape() {
                return Err(Error::Protocol(format!(
                    "worker {rank} sent shape {:?}, expected {:?}",
                    x.shape(),
                    t.shape()
                )));
            }
        }
    }
    weighted_mean(&msgs, t.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAG: Tag = Tag {
        step: 1,
        phase: Phase::Warmup,
    };

    #[test]
    fn sign_bits_roundtrip() {
        let s = SignBits::from_values(&[0.5, -0.2, 0.0, -0.0, -3.0, 1.0, 2.0, -1.0, 4.0]);
        assert_eq!(s.len(), 9);
        assert_eq!(s.as_bytes().len(), 2);
        assert_eq!(
            s.scaled(2.0),
            vec![2.0, -2.0, 2.0, 2.0, -2.0, 2.0, 2.0, -2.0, 2.0]
        );
    }

    #[test]
    fn threaded_mean_matches_hand_value() {
        let comms = thread_group(2);
        let inputs = [Tensor::vector(&[1.0, 3.0]), Tensor::vector(&[3.0, 5.0])];
        let out: Vec<Tensor> = std::thread::scope(|s| {
            let handles: Vec<_> = comms
                .into_iter()
                .zip(&inputs)
                .map(|(mut c, t)| s.spawn(move || allreduce_weighted(&mut c, TAG, t, 1.0).unwrap()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(out[0].data(), &[2.0, 4.0]);
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn step_mismatch_is_protocol_error() {
        let comms = thread_group(2);
        let results: Vec<Result<Tensor>> = std::thread::scope(|s| {
            let handles: Vec<_> = comms
                .into_iter()
                .enumerate()
                .map(|(i, mut c)| {
                    s.spawn(move || {
                        let tag = Tag {
                            step: 1 + i as u64,
                            phase: Phase::Warmup,
                        };
                        allreduce_weighted(&mut c, tag, &Tensor::vector(&[1.0]), 1.0)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.iter().all(|r| matches!(r, Err(Error::Protocol(_)))));
    }

    #[test]
    fn local_is_identity() {
        let t = Tensor::vector(&[0.1, 0.7]);
        assert_eq!(allreduce_weighted(&mut LocalComm, TAG, &t, 3.0).unwrap(), t);
    }
}
