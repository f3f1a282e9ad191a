//! One training iteration: forwards, gating, loss assembly, backward,
//! optimizer step, EMA update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gradcore::{sgd_step, SgdState, Tensor, TensorError};
use crate::losses::{
    assemble_total, ce_loss, dda_align_loss, dda_mask, dice_loss, plf_check, teacher_consistency,
    unsup_loss, LossParts, LossWeights,
};
use crate::seeding::{derive, tag};
use crate::segnet::{ModelPair, SegNet, Which};

use super::{lr_at, Batch, HistoryRow, Mode, TrainerConfig, TrainingSet};

/// Stacks samples into a `[N,1,H,W]` tensor.
fn stack_images(samples: &[&crate::synthdata::Sample], h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    Tensor::leaf(data, vec![samples.len(), 1, h, w], false)
}

fn stack_masks(samples: &[&crate::synthdata::Sample], h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend(s.mask.iter().map(|&m| m as f32));
    }
    Tensor::leaf(data, vec![samples.len(), 1, h, w], false)
}

/// Gaussian input perturbation for the teacher, derived statelessly from
/// `(seed, model, iter)` so resumed runs replay it exactly.
fn perturb(
    x: &Tensor<f32>,
    sigma: f64,
    seed: u64,
    model: usize,
    iter: usize,
) -> Result<Tensor<f32>, TensorError> {
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let key = ((model as u64) << 48) | iter as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag::TEACHER_NOISE, key));
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let noise: Vec<f32> = (0..x.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
    x.add(&Tensor::leaf(noise, x.shape(), false))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn train_iteration(
    net: &SegNet,
    pairs: &[ModelPair<f32>],
    model: usize,
    iter: usize,
    round: usize,
    cfg: &TrainerConfig,
    weights: &LossWeights,
    batch: &Batch,
    data: &TrainingSet,
    sgd: &mut SgdState,
) -> Result<HistoryRow, super::TrainError> {
    let t_max = weights.resolve_t_max(cfg.total_iters);
    let lr = lr_at(iter, cfg);
    sgd.learning_rate = lr;

    let result = (|| -> Result<HistoryRow, super::TrainError> {
        let labeled: Vec<&crate::synthdata::Sample> =
            batch.labeled.iter().map(|&i| &data.labeled[i]).collect();
        let unlabeled: Vec<&crate::synthdata::Sample> =
            batch.unlabeled.iter().map(|&i| &data.unlabeled[i]).collect();
        let n_lab = labeled.len();
        let n_unl = if cfg.mode == Mode::SupervisedBaseline {
            0
        } else {
            unlabeled.len()
        };
        let x_l = stack_images(&labeled, data.h, data.w);
        let gt = stack_masks(&labeled, data.h, data.w);
        let pair = &pairs[model];

        // concatenated forward over labeled + unlabeled keeps one graph
        let (pred_l, pred_u, x_u) = if n_unl > 0 {
            let x_u = stack_images(&unlabeled, data.h, data.w);
            let x_all = Tensor::concat(&[x_l.clone(), x_u.clone()], 0)?;
            let pred_all = pair.forward(net, Which::Student, &x_all, true)?;
            (
                pred_all.narrow(0, 0, n_lab)?,
                Some(pred_all.narrow(0, n_lab, n_unl)?),
                Some(x_u),
            )
        } else {
            (pair.forward(net, Which::Student, &x_l, true)?, None, None)
        };

        let mut plf_pass = 1u8;
        let mut aln = None;
        let mut unsup = None;
        let mut teacher = None;

        if cfg.mode == Mode::Pmt {
            let peer = &pairs[1 - model];
            let peer_l = peer.forward(net, Which::Student, &x_l, false)?;
            if cfg.plf_on {
                plf_pass = plf_check(&pred_l, &peer_l, &gt)?;
            }
            if cfg.dda_on && plf_pass == 1 {
                let m_diff = dda_mask(&[pred_l.clone(), peer_l.clone()], 0.5)?;
                aln = Some(dda_align_loss(&pred_l, &gt, &m_diff)?);
            }
            if plf_pass == 1 {
                if let (Some(pred_u), Some(x_u)) = (&pred_u, &x_u) {
                    let peer_u = peer.forward(net, Which::Student, x_u, false)?;
                    unsup = Some(unsup_loss(pred_u, &peer_u, weights.temperature)?);
                }
            }
        }

        let teacher_active = match cfg.mode {
            Mode::Pmt => cfg.mt_on,
            Mode::MtBaseline => true,
            Mode::SupervisedBaseline => false,
        };
        if teacher_active {
            if let (Some(pred_u), Some(x_u)) = (&pred_u, &x_u) {
                let x_t = perturb(x_u, cfg.teacher_noise_sigma, cfg.seed, model, iter)?;
                let t_pred = pair.forward(net, Which::Teacher, &x_t, false)?;
                teacher = Some(teacher_consistency(pred_u, &t_pred, weights.temperature)?);
            }
        }

        let parts = LossParts {
            ce: ce_loss(&pred_l, &gt)?,
            dice: dice_loss(&pred_l, &gt)?,
            aln,
            unsup,
            teacher,
        };
        let (total, breakdown) = assemble_total(&parts, weights, iter, t_max, plf_pass)?;
        total.backward()?;
        sgd_step(&pair.student, sgd)?;
        pair.student.zero_grad();
        if teacher_active {
            pair.ema_update()?;
        }
        Ok(HistoryRow {
            iter,
            model,
            round,
            lr,
            loss: breakdown,
        })
    })();

    match result {
        Err(super::TrainError::Tensor(TensorError::NonFinite { op })) => {
            Err(super::TrainError::NonFiniteLoss {
                iter,
                model,
                context: format!("op {op}, lr {lr}, stream_index {}", batch.stream_index),
            })
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::progressive::TrainerState;
    use crate::segnet::SegNetConfig;
    use crate::synthdata::{generate, split, DataGenConfig};

    fn tiny_setup(mode: Mode, seed: u64) -> (TrainerState, TrainingSet) {
        let data_cfg = DataGenConfig {
            count: 24,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let samples = generate(&data_cfg).unwrap();
        let sp = split(samples.len(), 0.3, seed).unwrap();
        let (tset, _) = TrainingSet::from_split(&samples, &sp);
        let cfg = TrainerConfig {
            total_iters: 12,
            buffer_len: 4,
            seed,
            mode,
            ..Default::default()
        };
        let net_cfg = SegNetConfig {
            base_filters: 2,
            depth: 1,
            ..Default::default()
        };
        let state = TrainerState::init(cfg, net_cfg, LossWeights::default()).unwrap();
        (state, tset)
    }

    #[test]
    fn pmt_run_completes_and_logs_all_iterations() {
        let (mut state, data) = tiny_setup(Mode::Pmt, 3);
        state.run(&data).unwrap();
        assert!(state.finished());
        // both models consumed total_iters batches
        assert_eq!(state.sched.iters(), &[12, 12]);
        assert_eq!(state.history.len(), 24);
        // per-model consumed indices are the contiguous prefix [0, 12)
        for m in 0..2 {
            let seen: Vec<usize> = state
                .history
                .iter()
                .filter(|r| r.model == m)
                .map(|r| r.iter)
                .collect();
            assert_eq!(seen, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn breakdown_identity_holds_in_every_row() {
        let (mut state, data) = tiny_setup(Mode::Pmt, 5);
        state.run(&data).unwrap();
        for r in &state.history {
            let b = &r.loss;
            let plf = f64::from(b.plf_pass);
            let expect = b.l_s + b.lambda1_t * plf * b.l_u + b.lambda2_t * b.l_t;
            assert!((b.l_total - expect).abs() < 1e-6);
            assert!(b.l_ce >= 0.0 && b.l_dice >= 0.0 && b.l_aln >= 0.0);
        }
    }

    #[test]
    fn peer_parameters_bitwise_frozen_through_a_phase() {
        let (mut state, data) = tiny_setup(Mode::Pmt, 7);
        // phase 1 trains model 0; snapshot model 1 before
        let peer_before = state.pairs[1].student.deep_clone();
        let teacher_before = state.pairs[1].teacher.deep_clone();
        state.run_steps(&data, Some(4)).unwrap(); // first phase = lead = 4
        assert!(state.pairs[1].student.bitwise_eq(&peer_before));
        assert!(state.pairs[1].teacher.bitwise_eq(&teacher_before));
        // and model 0 actually changed
        let trained = &state.pairs[0].student;
        let fresh_pair_params = peer_before.iter().count();
        assert_eq!(trained.iter().count(), fresh_pair_params);
    }

    #[test]
    fn supervised_baseline_reduces_to_ce_plus_dice() {
        let (mut state, data) = tiny_setup(Mode::SupervisedBaseline, 11);
        state.run(&data).unwrap();
        assert_eq!(state.pairs.len(), 1);
        for r in &state.history {
            let b = &r.loss;
            assert_eq!(b.l_u, 0.0);
            assert_eq!(b.l_t, 0.0);
            assert_eq!(b.l_aln, 0.0);
            assert!((b.l_total - (b.l_ce + b.l_dice)).abs() < 1e-9);
        }
    }

    #[test]
    fn mt_baseline_has_teacher_term_but_no_peer_terms() {
        let (mut state, data) = tiny_setup(Mode::MtBaseline, 11);
        state.run(&data).unwrap();
        let has_teacher = state.history.iter().any(|r| r.loss.l_t > 0.0);
        assert!(has_teacher);
        for r in &state.history {
            assert_eq!(r.loss.l_u, 0.0);
            assert_eq!(r.loss.l_aln, 0.0);
            assert_eq!(r.loss.plf_pass, 1);
        }
    }

    #[test]
    fn toggles_remove_exactly_their_terms() {
        let run_with = |plf: bool, dda: bool, mt: bool| {
            let data_cfg = DataGenConfig {
                count: 24,
                height: 16,
                width: 16,
                ..Default::default()
            };
            let samples = generate(&data_cfg).unwrap();
            let sp = split(samples.len(), 0.3, 2).unwrap();
            let (tset, _) = TrainingSet::from_split(&samples, &sp);
            let cfg = TrainerConfig {
                total_iters: 8,
                buffer_len: 4,
                seed: 2,
                plf_on: plf,
                dda_on: dda,
                mt_on: mt,
                ..Default::default()
            };
            let net_cfg = SegNetConfig {
                base_filters: 2,
                depth: 1,
                ..Default::default()
            };
            let mut state = TrainerState::init(cfg, net_cfg, LossWeights::default()).unwrap();
            state.run(&tset).unwrap();
            state.history
        };
        // plf off -> gate forced open everywhere
        for r in run_with(false, true, true) {
            assert_eq!(r.loss.plf_pass, 1);
        }
        // dda off -> alignment absent
        for r in run_with(true, false, true) {
            assert_eq!(r.loss.l_aln, 0.0);
        }
        // mt off -> teacher term absent
        for r in run_with(true, true, false) {
            assert_eq!(r.loss.l_t, 0.0);
        }
    }

    #[test]
    fn mt_off_leaves_teacher_parameters_untouched() {
        let data_cfg = DataGenConfig {
            count: 24,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let samples = generate(&data_cfg).unwrap();
        let sp = split(samples.len(), 0.3, 2).unwrap();
        let (tset, _) = TrainingSet::from_split(&samples, &sp);
        let cfg = TrainerConfig {
            total_iters: 8,
            buffer_len: 4,
            seed: 2,
            mt_on: false,
            ..Default::default()
        };
        let net_cfg = SegNetConfig {
            base_filters: 2,
            depth: 1,
            ..Default::default()
        };
        let mut state = TrainerState::init(cfg, net_cfg, LossWeights::default()).unwrap();
        let t0 = state.pairs[0].teacher.deep_clone();
        state.run(&tset).unwrap();
        assert!(state.pairs[0].teacher.bitwise_eq(&t0));
        assert!(!state.pairs[0].student.bitwise_eq(&t0));
    }

    #[test]
    fn fixed_seed_runs_are_bitwise_identical() {
        let run = || {
            let (mut state, data) = tiny_setup(Mode::Pmt, 17);
            state.run(&data).unwrap();
            super::super::history_csv(&state.history)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gap_invariant_after_each_phase_of_a_real_run() {
        let (mut state, data) = tiny_setup(Mode::Pmt, 19);
        // run phase by phase and check the boundary gap
        while !state.finished() {
            let round_before = state.sched.round();
            while state.sched.round() == round_before && !state.finished() {
                state.run_steps(&data, Some(1)).unwrap();
            }
            if state.finished() {
                break;
            }
            assert_eq!(state.sched.order_stat_gaps(), vec![state.sched.lead()]);
        }
    }
}
