//! The iteration-gap scheduler and the batch buffer.
//!
//! Models consume a single global batch stream, each through its own cursor.
//! One model at a time — the one with the least progress — trains for a
//! phase; the phase ends when its cursor leads the previously most advanced
//! cursor by exactly `lead` batches. After a burn-in of the first `n - 1`
//! phases the sorted cursors sit `lead` apart, and that spacing is restored
//! at every phase boundary.
//!
//! The buffer retains the stream window `[min(cursors), head)` so a lagging
//! model replays exactly the batches its leading peer trained on. For two
//! models with lead `B` the window never exceeds `2B` batches.

use std::collections::VecDeque;
use std::rc::Rc;

use super::{Batch, TrainError};

/// An in-progress training phase: `model` trains until its cursor reaches
/// `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub model: usize,
    pub end: usize,
}

/// Per-model cursors plus phase bookkeeping.
#[derive(Debug, Clone)]
pub struct GapScheduler {
    iters: Vec<usize>,
    lead: usize,
    round: usize,
    phase: Option<Phase>,
}

impl GapScheduler {
    pub fn new(n_models: usize, lead: usize) -> Self {
        assert!(n_models >= 1 && lead >= 1);
        GapScheduler {
            iters: vec![0; n_models],
            lead,
            round: 0,
            phase: None,
        }
    }

    pub(crate) fn from_parts(iters: Vec<usize>, lead: usize, round: usize, phase: Option<Phase>) -> Self {
        GapScheduler {
            iters,
            lead,
            round,
            phase,
        }
    }

    pub fn n_models(&self) -> usize {
        self.iters.len()
    }

    pub fn lead(&self) -> usize {
        self.lead
    }

    pub fn iters(&self) -> &[usize] {
        &self.iters
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn phase(&self) -> Option<Phase> {
        self.phase
    }

    pub fn min_iter(&self) -> usize {
        *self.iters.iter().min().expect("at least one model")
    }

    pub fn max_iter(&self) -> usize {
        *self.iters.iter().max().expect("at least one model")
    }

    /// The next model to train: least progress, ties to the lowest id.
    pub fn next_cpm(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.iters.iter().enumerate() {
            if v < self.iters[best] {
                best = i;
            }
        }
        best
    }

    /// Starts a phase for the current laggard, targeting a lead of exactly
    /// `self.lead` over the most advanced cursor (capped at `t_max`).
    /// Returns `None` when every cursor has reached `t_max`.
    pub fn begin_phase(&mut self, t_max: usize) -> Option<Phase> {
        assert!(self.phase.is_none(), "phase already active");
        if self.min_iter() >= t_max {
            return None;
        }
        let model = self.next_cpm();
        let end = (self.max_iter() + self.lead).min(t_max);
        let phase = Phase { model, end };
        self.phase = Some(phase);
        Some(phase)
    }

    /// Records one consumed batch for the active phase's model. Returns
    /// `true` when the phase just completed (cursor reached its target).
    pub fn advance(&mut self) -> bool {
        let phase = self.phase.expect("no active phase");
        self.iters[phase.model] += 1;
        if self.iters[phase.model] >= phase.end {
            self.phase = None;
            self.round += 1;
            true
        } else {
            false
        }
    }

    /// Differences between consecutive descending order statistics of the
    /// cursors. At steady state every entry equals `lead`.
    pub fn order_stat_gaps(&self) -> Vec<usize> {
        let mut sorted = self.iters.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

/// Retained window of the batch stream, addressed by absolute stream index.
#[derive(Debug, Clone, Default)]
pub struct BatchBuffer {
    base: usize,
    items: VecDeque<Rc<Batch>>,
    peak_len: usize,
}

impl BatchBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(base: usize, items: Vec<Rc<Batch>>) -> Self {
        let peak_len = items.len();
        BatchBuffer {
            base,
            items: items.into(),
            peak_len,
        }
    }

    /// First retained stream index.
    pub fn base(&self) -> usize {
        self.base
    }

    /// One past the newest stream index.
    pub fn head(&self) -> usize {
        self.base + self.items.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Largest window ever held; bounded by `2 * lead` for two models.
    pub fn peak_len(&self) -> usize {
        self.peak_len
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Batch>> {
        self.items.iter()
    }

    pub fn push_fresh(&mut self, batch: Batch) {
        debug_assert_eq!(batch.stream_index, self.head());
        self.items.push_back(Rc::new(batch));
        self.peak_len = self.peak_len.max(self.items.len());
    }

    /// Fetches the batch at an absolute stream index.
    pub fn get(&self, index: usize) -> Result<Rc<Batch>, TrainError> {
        if index < self.base || index >= self.head() {
            return Err(TrainError::BufferUnderflow {
                index,
                base: self.base,
                head: self.head(),
            });
        }
        Ok(Rc::clone(&self.items[index - self.base]))
    }

    /// Drops batches below `new_base` (the slowest cursor after a phase).
    pub fn trim_to(&mut self, new_base: usize) {
        while self.base < new_base && !self.items.is_empty() {
            self.items.pop_front();
            self.base += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Drives scheduler + buffer with no-op training; returns per-model
    /// consumed indices and the gap vector observed at each phase end.
    fn simulate(n: usize, lead: usize, t_max: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, usize) {
        let mut sched = GapScheduler::new(n, lead);
        let mut buffer = BatchBuffer::new();
        let mut consumed = vec![Vec::new(); n];
        let mut gaps_at_round_end = Vec::new();
        while let Some(phase) = sched.begin_phase(t_max) {
            loop {
                let idx = sched.iters()[phase.model];
                if idx == buffer.head() {
                    buffer.push_fresh(Batch {
                        labeled: vec![],
                        unlabeled: vec![],
                        stream_index: idx,
                    });
                }
                let b = buffer.get(idx).unwrap();
                assert_eq!(b.stream_index, idx);
                consumed[phase.model].push(idx);
                if sched.advance() {
                    break;
                }
            }
            buffer.trim_to(sched.min_iter());
            gaps_at_round_end.push(sched.order_stat_gaps());
        }
        (consumed, gaps_at_round_end, buffer.peak_len())
    }

    #[test]
    fn hand_simulated_schedule_n2_b4() {
        // phases: model0 [0..4), model1 [0..8), model0 [4..12); cursors
        // (4,0) -> (4,8) -> (12,8), gap 4 at every phase end
        let mut sched = GapScheduler::new(2, 4);
        let p = sched.begin_phase(1000).unwrap();
        assert_eq!(p, Phase { model: 0, end: 4 });
        for _ in 0..4 {
            sched.advance();
        }
        assert_eq!(sched.iters(), &[4, 0]);
        let p = sched.begin_phase(1000).unwrap();
        assert_eq!(p, Phase { model: 1, end: 8 });
        for _ in 0..8 {
            sched.advance();
        }
        assert_eq!(sched.iters(), &[4, 8]);
        let p = sched.begin_phase(1000).unwrap();
        assert_eq!(p, Phase { model: 0, end: 12 });
        for _ in 0..8 {
            sched.advance();
        }
        assert_eq!(sched.iters(), &[12, 8]);
        assert_eq!(sched.order_stat_gaps(), vec![4]);
        assert_eq!(sched.round(), 3);
    }

    #[test]
    fn cpm_selection_argmin_with_tiebreak() {
        let sched = GapScheduler::from_parts(vec![0, 0], 4, 0, None);
        assert_eq!(sched.next_cpm(), 0);
        let sched = GapScheduler::from_parts(vec![40, 20], 20, 0, None);
        assert_eq!(sched.next_cpm(), 1);
        let sched = GapScheduler::from_parts(vec![40, 60], 20, 0, None);
        assert_eq!(sched.next_cpm(), 0);
    }

    #[test]
    fn gap_invariant_holds_after_burn_in() {
        for (n, lead) in [(2usize, 4usize), (2, 20), (3, 3)] {
            let (_, gaps, _) = simulate(n, lead, lead * 40);
            assert!(gaps.len() >= 10, "want >= 10 rounds, got {}", gaps.len());
            // ignore capped wind-down rounds at the very end
            for (round, g) in gaps.iter().enumerate().skip(n - 1) {
                if round >= gaps.len() - n {
                    continue;
                }
                assert!(
                    g.iter().all(|&v| v == lead),
                    "round {round}: gaps {g:?} != {lead}"
                );
            }
        }
    }

    #[test]
    fn consumption_is_contiguous_per_model() {
        let (consumed, _, _) = simulate(2, 4, 100);
        for per_model in &consumed {
            for (expect, &got) in per_model.iter().enumerate() {
                assert_eq!(expect, got);
            }
            assert_eq!(per_model.len(), 100);
        }
        let (consumed3, _, _) = simulate(3, 6, 96);
        for per_model in &consumed3 {
            for (expect, &got) in per_model.iter().enumerate() {
                assert_eq!(expect, got);
            }
        }
    }

    #[test]
    fn buffer_capacity_bounded_by_twice_lead() {
        let (_, _, peak) = simulate(2, 20, 400);
        assert_eq!(peak, 40);
        let (_, _, peak4) = simulate(2, 4, 400);
        assert_eq!(peak4, 8);
    }

    #[test]
    fn all_cursors_end_exactly_at_t_max() {
        for (n, lead, t_max) in [(2, 4, 100), (2, 20, 2000), (3, 3, 60)] {
            let mut sched = GapScheduler::new(n, lead);
            while let Some(_p) = sched.begin_phase(t_max) {
                while !sched.advance() {}
            }
            assert!(sched.iters().iter().all(|&v| v == t_max));
        }
    }

    #[test]
    fn buffer_underflow_is_typed_error() {
        let mut buffer = BatchBuffer::new();
        buffer.push_fresh(Batch {
            labeled: vec![],
            unlabeled: vec![],
            stream_index: 0,
        });
        buffer.trim_to(1);
        assert!(matches!(
            buffer.get(0),
            Err(TrainError::BufferUnderflow { .. })
        ));
        assert!(buffer.get(5).is_err());
    }
}
