//! Speaker and contextual memory banks: storage, attention retrieval and
//! FIFO / attention-based (ABS) eviction.
//!
//! Axis conventions, used by every retrieval routine and test in this crate:
//!
//! * Speaker bank, slots `S ∈ R^{N×C}`. `A = softmax(Q Kᵀ / √C)` normalizes
//!   each row (query slot) over the key slots. The slot weights are the
//!   column means of `A`, `ā_j = (1/N) Σ_i A_ij`, and `m = ā V`.
//! * Contextual bank, slots `B_n ∈ R^{L×C}`, mixture `Y ∈ R^{L×C}`.
//!   First layer, per slot: keys come from `Y`, queries and values from
//!   `B_n`. Weights are normalized over slot positions for every mixture
//!   position, `W_ij = softmax_j(k_i · q_j / √C)`, and the filtered slot is
//!   `B'_n[i] = Σ_j W_ij v_j`, aligned to the mixture time axis.
//!   Second layer: `A_ln = softmax_n(q'_{n,l} · k'_l / √C)` with `q'` from
//!   `B'_n`, `k'` from `Y`, normalized over slots at each position `l`, and
//!   `M^c[l] = Σ_n A_ln v'_{n,l}` with `v'` from the raw slots `B_n`.
//!   Per-slot scores are `A` averaged over positions.

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    #[default]
    Fifo,
    Abs,
}

/// Bounded ordered store; index 0 is the oldest slot.
#[derive(Clone, Debug)]
pub struct SlotQueue<T> {
    slots: VecDeque<T>,
    capacity: usize,
    policy: UpdatePolicy,
    last_scores: Option<Vec<f64>>,
}

impl<T> SlotQueue<T> {
    pub fn new(capacity: usize, policy: UpdatePolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("bank capacity must be at least 1"));
        }
        Ok(Self { slots: VecDeque::with_capacity(capacity), capacity, policy, last_scores: None })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> UpdatePolicy {
        self.policy
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.slots.iter()
    }

    pub fn last_scores(&self) -> Option<&[f64]> {
        self.last_scores.as_deref()
    }

    /// Records the slot scores of a retrieval over the current contents.
    pub fn observe_scores(&mut self, scores: Vec<f64>) {
        if scores.len() == self.slots.len() {
            self.last_scores = Some(scores);
        }
    }

    /// Slot to evict when full. ABS takes the argmin of the most recent
    /// scores, oldest first among ties; without usable scores it falls back
    /// to the oldest slot.
    pub fn eviction_index(&self) -> usize {
        match (self.policy, &self.last_scores) {
            (UpdatePolicy::Abs, Some(scores)) if scores.len() == self.slots.len() => {
                let mut best = 0;
                for (i, s) in scores.iter().enumerate() {
                    if *s < scores[best] {
                        best = i;
                    }
                }
                best
            }
            _ => 0,
        }
    }

    /// Appends `item`, evicting per policy when full. Returns the evicted slot.
    pub fn push(&mut self, item: T) -> Option<(usize, T)> {
        let evicted = if self.slots.len() >= self.capacity {
            let idx = self.eviction_index();
            self.slots.remove(idx).map(|t| (idx, t))
        } else {
            None
        };
        self.slots.push_back(item);
        // indices moved; old scores no longer describe the contents
        self.last_scores = None;
        evicted
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.last_scores = None;
    }
}

/// Self-attention projections for the speaker bank.
#[derive(Clone, Debug)]
pub struct SpeakerAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl SpeakerAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            query: store.linear(&format!("{name}.query"), c, c, true)?,
            key: store.linear(&format!("{name}.key"), c, c, true)?,
            value: store.linear(&format!("{name}.value"), c, c, true)?,
        })
    }

    pub fn identity(c: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            query: Linear::identity(c, dtype)?,
            key: Linear::identity(c, dtype)?,
            value: Linear::identity(c, dtype)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.query.d_in()
    }
}

/// Projections of the two cross-attention layers of the contextual bank.
#[derive(Clone, Debug)]
pub struct ContextAttention {
    pub filter_key: Linear,
    pub filter_query: Linear,
    pub filter_value: Linear,
    pub select_key: Linear,
    pub select_query: Linear,
    pub select_value: Linear,
}

impl ContextAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let mut lin = |part: &str| store.linear(&format!("{name}.{part}"), c, c, true);
        Ok(Self {
            filter_key: lin("filter_key")?,
            filter_query: lin("filter_query")?,
            filter_value: lin("filter_value")?,
            select_key: lin("select_key")?,
            select_query: lin("select_query")?,
            select_value: lin("select_value")?,
        })
    }

    pub fn identity(c: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            filter_key: Linear::identity(c, dtype)?,
            filter_query: Linear::identity(c, dtype)?,
            filter_value: Linear::identity(c, dtype)?,
            select_key: Linear::identity(c, dtype)?,
            select_query: Linear::identity(c, dtype)?,
            select_value: Linear::identity(c, dtype)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.filter_key.d_in()
    }
}

/// Intermediate tensors of a speaker retrieval.
#[derive(Clone, Debug)]
pub struct SpeakerRetrieval {
    /// `(B, N, N)`, rows sum to one.
    pub attention: Tensor,
    /// `(B, N)`.
    pub slot_weights: Tensor,
    /// `(B, C)`.
    pub feature: Tensor,
}

/// Batched speaker-bank retrieval over slots `(B, N, C)`.
pub fn speaker_retrieve(slots: &Tensor, att: &SpeakerAttention) -> Result<SpeakerRetrieval> {
    let (_, n, c) = slots.dims3()?;
    if n == 0 {
        return Err(Error::EmptyBank);
    }
    if c != att.channels() {
        return Err(Error::invalid(format!("slot width {c} != projection width {}", att.channels())));
    }
    let q = att.query.forward(slots)?;
    let k = att.key.forward(slots)?;
    let v = att.value.forward(slots)?;
    let logits = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
    let attention = nn::softmax(&logits, 2)?;
    let slot_weights = attention.mean(1)?;
    let feature = slot_weights.unsqueeze(1)?.matmul(&v)?.squeeze(1)?;
    Ok(SpeakerRetrieval { attention, slot_weights, feature })
}

#[derive(Clone, Debug)]
pub struct ContextRetrieval {
    /// Filtered slots `(B, N, L, C)`.
    pub filtered: Tensor,
    /// Per-position slot weights `(B, L, N)`, rows sum to one.
    pub attention: Tensor,
    /// `(B, N)`: `attention` averaged over positions.
    pub slot_weights: Tensor,
    /// `(B, L, C)`.
    pub feature: Tensor,
}

/// Batched contextual-bank retrieval: slots `(B, N, L, C)`, mixture `(B, L, C)`.
pub fn context_retrieve(slots: &Tensor, mixture: &Tensor, att: &ContextAttention) -> Result<ContextRetrieval> {
    let (b, n, l, c) = slots.dims4()?;
    if n == 0 {
        return Err(Error::EmptyBank);
    }
    let (mb, ml, mc) = mixture.dims3()?;
    if (mb, ml, mc) != (b, l, c) {
        return Err(Error::invalid(format!(
            "mixture latent {:?} does not match slots (batch {b}, length {l}, width {c})",
            mixture.dims()
        )));
    }
    if c != att.channels() {
        return Err(Error::invalid(format!("slot width {c} != projection width {}", att.channels())));
    }
    let scale = (c as f64).sqrt();

    let k1 = att.filter_key.forward(mixture)?;
    let k1 = k1.unsqueeze(1)?.broadcast_as((b, n, l, c))?.reshape((b * n, l, c))?;
    let q1 = att.filter_query.forward(slots)?.reshape((b * n, l, c))?;
    let v1 = att.filter_value.forward(slots)?.reshape((b * n, l, c))?;
    let w1 = nn::softmax(&(k1.matmul(&q1.t()?)? / scale)?, 2)?;
    let filtered = w1.matmul(&v1)?.reshape((b, n, l, c))?;

    let k2 = att.select_key.forward(mixture)?.unsqueeze(1)?;
    let q2 = att.select_query.forward(&filtered)?;
    let v2 = att.select_value.forward(slots)?;
    let logits = (q2.broadcast_mul(&k2)?.sum(3)? / scale)?; // (B, N, L)
    let attention = nn::softmax(&logits.transpose(1, 2)?, 2)?; // (B, L, N)
    let weights = attention.transpose(1, 2)?.unsqueeze(3)?; // (B, N, L, 1)
    let feature = v2.broadcast_mul(&weights)?.sum(1)?;
    let slot_weights = attention.mean(1)?;
    Ok(ContextRetrieval { filtered, attention, slot_weights, feature })
}

/// Retrieved feature plus per-slot weights (non-negative, summing to one).
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    /// `(L, C)`; the speaker feature is repeated along time.
    pub feature: Tensor,
    pub slot_scores: Vec<f64>,
}

fn row_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Snapshot of a bank's slots for stream-state checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub capacity: usize,
    pub policy: UpdatePolicy,
    pub slot_shape: Vec<usize>,
    pub slots: Vec<Vec<f64>>,
    pub last_scores: Option<Vec<f64>>,
}

macro_rules! bank_common {
    () => {
        pub fn len(&self) -> usize {
            self.queue.len()
        }

        pub fn is_empty(&self) -> bool {
            self.queue.is_empty()
        }

        pub fn capacity(&self) -> usize {
            self.queue.capacity()
        }

        pub fn policy(&self) -> UpdatePolicy {
            self.queue.policy()
        }

        pub fn slots(&self) -> impl Iterator<Item = &Tensor> {
            self.queue.iter()
        }

        pub fn last_scores(&self) -> Option<&[f64]> {
            self.queue.last_scores()
        }

        pub fn observe_scores(&mut self, scores: Vec<f64>) {
            self.queue.observe_scores(scores)
        }

        /// Empties the bank; capacity and policy are kept.
        pub fn reset(&mut self) {
            self.queue.clear();
        }

        /// Sum of all slot values, a cheap content fingerprint for traces.
        pub fn digest(&self) -> Result<f64> {
            let mut total = 0.0;
            for s in self.queue.iter() {
                total += nn::scalar(&s.to_dtype(DType::F64)?.sum_all()?)?;
            }
            Ok(total)
        }

        pub fn snapshot(&self) -> Result<BankSnapshot> {
            Ok(BankSnapshot {
                capacity: self.capacity(),
                policy: self.policy(),
                slot_shape: self.slot_shape().to_vec(),
                slots: self.queue.iter().map(row_vec).collect::<Result<_>>()?,
                last_scores: self.queue.last_scores().map(<[f64]>::to_vec),
            })
        }
    };
}

/// Bank of speaker embeddings, each `(C,)`.
#[derive(Clone, Debug)]
pub struct SpeakerBank {
    queue: SlotQueue<Tensor>,
    channels: usize,
}

impl SpeakerBank {
    pub fn new(capacity: usize, policy: UpdatePolicy, channels: usize) -> Result<Self> {
        Ok(Self { queue: SlotQueue::new(capacity, policy)?, channels })
    }

    bank_common!();

    fn slot_shape(&self) -> [usize; 1] {
        [self.channels]
    }

    pub fn store(&mut self, embedding: &Tensor) -> Result<()> {
        if embedding.dims() != [self.channels] {
            return Err(Error::invalid(format!(
                "speaker slot must be ({},), got {:?}",
                self.channels,
                embedding.dims()
            )));
        }
        self.queue.push(embedding.detach());
        Ok(())
    }

    /// Slots stacked as `(1, N, C)`.
    pub fn stacked(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        let slots: Vec<&Tensor> = self.queue.iter().collect();
        Ok(Tensor::stack(&slots, 0)?.unsqueeze(0)?)
    }

    /// Retrieves the speaker feature repeated to `rows` positions and records
    /// the slot weights for ABS.
    pub fn retrieve(&mut self, att: &SpeakerAttention, rows: usize) -> Result<RetrievalResult> {
        let r = speaker_retrieve(&self.stacked()?, att)?;
        let scores = row_vec(&r.slot_weights)?;
        self.queue.observe_scores(scores.clone());
        let feature = r.feature.broadcast_as((rows, self.channels))?.contiguous()?;
        Ok(RetrievalResult { feature, slot_scores: scores })
    }

    pub fn from_snapshot(s: &BankSnapshot, dtype: DType) -> Result<Self> {
        let channels = *s.slot_shape.first().ok_or_else(|| Error::invalid("bad snapshot shape"))?;
        let mut bank = Self::new(s.capacity, s.policy, channels)?;
        for slot in &s.slots {
            bank.store(&Tensor::from_vec(slot.clone(), channels, &Device::Cpu)?.to_dtype(dtype)?)?;
        }
        if let Some(sc) = &s.last_scores {
            bank.observe_scores(sc.clone());
        }
        Ok(bank)
    }
}

/// Bank of latent speech sequences, each `(L, C)`.
#[derive(Clone, Debug)]
pub struct ContextualBank {
    queue: SlotQueue<Tensor>,
    shape: [usize; 2],
}

impl ContextualBank {
    pub fn new(capacity: usize, policy: UpdatePolicy, len: usize, channels: usize) -> Result<Self> {
        Ok(Self { queue: SlotQueue::new(capacity, policy)?, shape: [len, channels] })
    }

    bank_common!();

    fn slot_shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn store(&mut self, latent: &Tensor) -> Result<()> {
        if latent.dims() != self.shape {
            return Err(Error::invalid(format!(
                "contextual slot must be {:?}, got {:?}",
                self.shape,
                latent.dims()
            )));
        }
        self.queue.push(latent.detach());
        Ok(())
    }

    /// Slots stacked as `(1, N, L, C)`.
    pub fn stacked(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        let slots: Vec<&Tensor> = self.queue.iter().collect();
        Ok(Tensor::stack(&slots, 0)?.unsqueeze(0)?)
    }

    /// `mixture` is the `(L, C)` latent of the current window.
    pub fn retrieve(&mut self, att: &ContextAttention, mixture: &Tensor) -> Result<RetrievalResult> {
        let stacked = self.stacked()?;
        let r = context_retrieve(&stacked, &mixture.unsqueeze(0)?, att)?;
        let scores = row_vec(&r.slot_weights)?;
        self.queue.observe_scores(scores.clone());
        Ok(RetrievalResult { feature: r.feature.squeeze(0)?, slot_scores: scores })
    }

    pub fn from_snapshot(s: &BankSnapshot, dtype: DType) -> Result<Self> {
        let [l, c] = <[usize; 2]>::try_from(s.slot_shape.as_slice())
            .map_err(|_| Error::invalid("bad snapshot shape"))?;
        let mut bank = Self::new(s.capacity, s.policy, l, c)?;
        for slot in &s.slots {
            bank.store(&Tensor::from_vec(slot.clone(), (l, c), &Device::Cpu)?.to_dtype(dtype)?)?;
        }
        if let Some(sc) = &s.last_scores {
            bank.observe_scores(sc.clone());
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        nn::rows_to_tensor(rows, DType::F64).unwrap()
    }

    #[test]
    fn store_appends_then_fifo_evicts() {
        let mut q = SlotQueue::new(3, UpdatePolicy::Fifo).unwrap();
        q.push('a');
        assert_eq!(q.iter().collect::<String>(), "a");
        q.push('b');
        q.push('c');
        assert_eq!(q.push('d'), Some((0, 'a')));
        assert_eq!(q.iter().collect::<String>(), "bcd");
    }

    #[test]
    fn abs_evicts_lowest_score() {
        let mut q = SlotQueue::new(3, UpdatePolicy::Abs).unwrap();
        for c in ['a', 'b', 'c'] {
            q.push(c);
        }
        q.observe_scores(vec![0.5, 0.2, 0.3]);
        assert_eq!(q.push('d'), Some((1, 'b')));
        assert_eq!(q.iter().collect::<String>(), "acd");
    }

    #[test]
    fn abs_tie_goes_to_oldest_and_missing_scores_fall_back() {
        let mut q = SlotQueue::new(3, UpdatePolicy::Abs).unwrap();
        for c in ['a', 'b', 'c'] {
            q.push(c);
        }
        q.observe_scores(vec![0.4, 0.3, 0.3]);
        assert_eq!(q.eviction_index(), 1);
        q.push('d');
        // scores were invalidated by the store
        assert_eq!(q.eviction_index(), 0);
        // wrong-length scores are ignored
        q.observe_scores(vec![0.1, 0.9]);
        assert_eq!(q.last_scores(), None);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(SlotQueue::<u8>::new(0, UpdatePolicy::Fifo).is_err());
    }

    #[test]
    fn reset_keeps_capacity() {
        let mut bank = SpeakerBank::new(4, UpdatePolicy::Fifo, 2).unwrap();
        bank.store(&Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap()).unwrap();
        bank.reset();
        assert_eq!(bank.len(), 0);
        assert_eq!(bank.capacity(), 4);
        let att = SpeakerAttention::identity(2, DType::F64).unwrap();
        assert!(matches!(bank.retrieve(&att, 3), Err(Error::EmptyBank)));
        bank.store(&Tensor::new(&[0.0f64, 1.0], &Device::Cpu).unwrap()).unwrap();
        let r = bank.retrieve(&att, 3).unwrap();
        assert_eq!(r.slot_scores, vec![1.0]);
        assert_eq!(r.feature.dims(), &[3, 2]);
    }

    #[test]
    fn slot_shape_is_checked() {
        let mut s = SpeakerBank::new(2, UpdatePolicy::Fifo, 3).unwrap();
        assert!(s.store(&Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap()).is_err());
        let mut c = ContextualBank::new(2, UpdatePolicy::Fifo, 4, 3).unwrap();
        assert!(c.store(&Tensor::zeros((3, 3), DType::F64, &Device::Cpu).unwrap()).is_err());
        assert!(c.store(&Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap()).is_ok());
    }

    #[test]
    fn single_speaker_slot_returns_value_projection() {
        let mut store = ParamStore::new(DType::F64, 5);
        let att = SpeakerAttention::new(&mut store, "s", 3).unwrap();
        let slot = t(&[&[0.3, -1.2, 2.0]]).unsqueeze(0).unwrap();
        let r = speaker_retrieve(&slot, &att).unwrap();
        assert_eq!(r.slot_weights.to_vec2::<f64>().unwrap(), vec![vec![1.0]]);
        let want = att.value.forward(&slot).unwrap().squeeze(1).unwrap();
        let diff = (r.feature - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(nn::scalar(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn identical_speaker_slots_split_evenly() {
        let mut store = ParamStore::new(DType::F64, 6);
        let att = SpeakerAttention::new(&mut store, "s", 2).unwrap();
        let slots = t(&[&[0.5, 0.1], &[0.5, 0.1]]).unsqueeze(0).unwrap();
        let w = speaker_retrieve(&slots, &att).unwrap().slot_weights.to_vec2::<f64>().unwrap();
        assert!((w[0][0] - 0.5).abs() < 1e-12 && (w[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_two_slot_speaker_oracle() {
        // B = I2, identity projections: logits = I / sqrt(2)
        let att = SpeakerAttention::identity(2, DType::F64).unwrap();
        let slots = t(&[&[1.0, 0.0], &[0.0, 1.0]]).unsqueeze(0).unwrap();
        let r = speaker_retrieve(&slots, &att).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let a = r.attention.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert!((a[0][0] - hi).abs() < 1e-12 && (a[0][1] - lo).abs() < 1e-12);
        let w = r.slot_weights.to_vec2::<f64>().unwrap();
        assert!((w[0][0] - 0.5).abs() < 1e-12);
        let f = r.feature.to_vec2::<f64>().unwrap();
        assert!((f[0][0] - 0.5).abs() < 1e-12 && (f[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_context_slot_returns_value_projection() {
        let mut store = ParamStore::new(DType::F64, 9);
        let att = ContextAttention::new(&mut store, "c", 2).unwrap();
        let slot = t(&[&[0.1, 0.2], &[0.3, -0.4], &[1.0, 0.0]]).unsqueeze(0).unwrap().unsqueeze(0).unwrap();
        let y = t(&[&[1.0, 1.0], &[0.0, -2.0], &[0.5, 0.5]]).unsqueeze(0).unwrap();
        let r = context_retrieve(&slot, &y, &att).unwrap();
        let a = r.attention.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let want = att.select_value.forward(&slot.squeeze(0).unwrap()).unwrap();
        let diff = (r.feature - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(nn::scalar(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn identical_context_slots_are_uniform() {
        let mut store = ParamStore::new(DType::F64, 10);
        let att = ContextAttention::new(&mut store, "c", 2).unwrap();
        let one = t(&[&[0.1, 0.2], &[0.3, -0.4]]);
        let slots = Tensor::stack(&[&one, &one, &one], 0).unwrap().unsqueeze(0).unwrap();
        let y = t(&[&[1.0, 1.0], &[0.0, -2.0]]).unsqueeze(0).unwrap();
        let r = context_retrieve(&slots, &y, &att).unwrap();
        for v in r.attention.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn context_length_mismatch_rejected() {
        let att = ContextAttention::identity(2, DType::F64).unwrap();
        let slots = Tensor::zeros((1, 1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 4, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(context_retrieve(&slots, &y, &att), Err(Error::InvalidArgument(_))));
        let empty = Tensor::zeros((1, 0, 4, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(context_retrieve(&empty, &y, &att), Err(Error::EmptyBank)));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut bank = ContextualBank::new(2, UpdatePolicy::Abs, 2, 2).unwrap();
        bank.store(&t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        bank.observe_scores(vec![1.0]);
        let snap = bank.snapshot().unwrap();
        let back = ContextualBank::from_snapshot(&snap, DType::F64).unwrap();
        assert_eq!(back.snapshot().unwrap(), snap);
    }
}
