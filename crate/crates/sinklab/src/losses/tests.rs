use super::*;
use crate::corpus::{generate_corpus, CorpusSpec, SampleKind, Split};
use crate::model::bind;
use crate::poison::{build_poison_set, Placement, TriggerSpec};
use crate::tensor::gradcheck;

fn tiny_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: vocab,
        max_seq_len: 64,
        rmu_layer: 1,
    }
}

struct Fixture {
    state: TransformerState,
    refs: ReferenceModels,
    forget: Vec<Sample>,
    retain: Vec<Sample>,
    poisoned: Vec<Sample>,
}

fn fixture(seed: u64) -> Fixture {
    let spec = CorpusSpec {
        n_forget: 6,
        n_retain: 6,
        ..CorpusSpec::default()
    };
    let sr = SeedRng::new(seed);
    let corpus = generate_corpus(&spec, &sr).unwrap();
    let cfg = tiny_cfg(spec.vocab_budget);
    let theta_o = TransformerState::init(&cfg, &sr).unwrap();
    let theta_u = TransformerState::init(&cfg, &SeedRng::new(seed + 1)).unwrap();
    let forget = corpus.split_samples(Split::Forget);
    let retain = corpus.split_samples(Split::Retain);
    let trig = TriggerSpec::preset("semantic", Placement::Prefix, &corpus.tokenizer).unwrap();
    let (poisoned, _) = build_poison_set(&forget, 0.5, &trig, &sr, 64).unwrap();
    Fixture {
        state: theta_o.clone(),
        refs: ReferenceModels {
            theta_o,
            theta_u: Some(theta_u),
        },
        forget,
        retain,
        poisoned,
    }
}

fn npo_cfg() -> LossConfig {
    LossConfig::default()
}

fn rmu_cfg() -> LossConfig {
    LossConfig {
        method: "rmu".into(),
        ..LossConfig::default()
    }
}

#[test]
fn seq_logprob_of_zero_state_is_uniform() {
    // All-zero parameters force uniform logits, so each answer token costs ln V.
    let cfg = tiny_cfg(8);
    let specs = crate::model::param_specs(&cfg);
    let zeros: Vec<Vec<f64>> = specs.iter().map(|(_, s)| vec![0.0; s.iter().product()]).collect();
    let state = TransformerState::from_buffers(cfg, zeros).unwrap();
    let s = Sample {
        prompt: vec![0, 5, 6],
        answer: vec![7, 4, 1],
        fact_id: 0,
        split: Split::Forget,
        kind: SampleKind::Qa,
    };
    let lp = seq_logprob(&state, &s).unwrap();
    assert!((lp + 3.0 * 8.0f64.ln()).abs() < 1e-12, "{lp}");
}

#[test]
fn seq_logprob_graph_matches_scalar_oracle() {
    let f = fixture(3);
    let s = &f.forget[0];
    let oracle = seq_logprob(&f.state, s).unwrap();
    let cache = RefCache::new();
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &f.state, false);
    let cfg = npo_cfg();
    let mut gb = GraphBuilder {
        tape: &mut tape,
        bound: &bound,
        model_cfg: &f.state.cfg,
        loss_cfg: &cfg,
        cache: &cache,
        rmu_target: None,
    };
    let node = gb.seq_logprob_node(s).unwrap();
    assert_eq!(tape.scalar_value(node), oracle);
}

#[test]
fn answer_logprob_saturated_kernel_hits_zero() {
    // Probability -> 1 on every target forces log-prob -> 0.
    let mut tape = Tape::new();
    let mut data = vec![0.0; 3 * 5];
    let targets = [2usize, 0, 4];
    for (i, &t) in targets.iter().enumerate() {
        data[i * 5 + t] = 1000.0;
    }
    let pred = tape.constant(data, vec![3, 5]);
    let node = answer_logprob_rows(&mut tape, pred, &targets, &[true, true, true]).unwrap();
    assert!(tape.scalar_value(node).abs() < 1e-12);
}

#[test]
fn npo_at_reference_is_two_over_beta_ln_two() {
    let f = fixture(4);
    let cfg = npo_cfg();
    let batches = Batches {
        forget: &f.forget[..4],
        retain: &f.retain[..2],
        vn_forget: &[],
        vn_poison: &[],
    };
    // state == theta_o, so every log-ratio is exactly zero.
    let b = objective(&f.state, &f.refs, &cfg, Mode::Unlearn, &batches, &SeedRng::new(0)).unwrap();
    let want = (2.0 / 0.7) * 2.0f64.ln();
    assert!((b.forget - want).abs() < 1e-9, "{} vs {want}", b.forget);
    assert!((want - 1.980_420_516_578_207).abs() < 1e-9);
}

#[test]
fn npo_vanishes_when_model_forgets_completely() {
    // Large negative log-ratio drives sigmoid to 1 and the loss to 0.
    let mut tape = Tape::new();
    let beta = 0.7;
    let z = tape.constant(vec![-200.0], vec![1]);
    let bz = tape.scale(z, beta);
    let sp = tape.softplus(bz);
    let loss = tape.scale(sp, 2.0 / beta);
    assert!(tape.scalar_value(loss) < 1e-12);
}

#[test]
fn npo_is_nonnegative_on_random_states() {
    let f = fixture(5);
    let cfg = npo_cfg();
    for seed in 0..4u64 {
        let st = TransformerState::init(&f.state.cfg, &SeedRng::new(100 + seed)).unwrap();
        let batches = Batches {
            forget: &f.forget[..3],
            retain: &f.retain[..1],
            vn_forget: &[],
            vn_poison: &[],
        };
        let b = objective(&st, &f.refs, &cfg, Mode::Unlearn, &batches, &SeedRng::new(0)).unwrap();
        assert!(b.forget >= 0.0);
        assert!(b.retain >= -1e-12, "KL must be nonnegative, got {}", b.retain);
    }
}

#[test]
fn kl_at_original_model_is_zero() {
    let f = fixture(6);
    let cfg = npo_cfg();
    let batches = Batches {
        forget: &f.forget[..2],
        retain: &f.retain[..4],
        vn_forget: &[],
        vn_poison: &[],
    };
    let b = objective(&f.state, &f.refs, &cfg, Mode::Unlearn, &batches, &SeedRng::new(0)).unwrap();
    assert!(b.retain.abs() < 1e-12, "{}", b.retain);
}

#[test]
fn kl_kernel_matches_hand_computation() {
    // p = [0.5, 0.5] against q = [0.25, 0.75]:
    // KL = 0.5 ln 2 + 0.5 ln(2/3).
    let mut tape = Tape::new();
    let pred = tape.constant(vec![0.0, 0.0], vec![1, 2]);
    let ref_lsm = tape.constant(vec![0.25f64.ln(), 0.75f64.ln()], vec![1, 2]);
    let node = kl_rows(&mut tape, pred, ref_lsm, &[true]).unwrap();
    let want = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((tape.scalar_value(node) - want).abs() < 1e-12);
    assert!((want - 0.143_841).abs() < 1e-6);
}

#[test]
fn rmu_rep_kernel_vanishes_at_exact_target() {
    let mut tape = Tape::new();
    let h = tape.constant(vec![0.3, -0.7, 1.1, 0.0, 2.0, -0.5], vec![2, 3]);
    let t = tape.constant(vec![0.3, -0.7, 1.1, 0.0, 2.0, -0.5], vec![2, 3]);
    let node = rep_alignment_rows(&mut tape, h, t).unwrap();
    assert_eq!(tape.scalar_value(node), 0.0);
}

#[test]
fn rmu_forget_with_zero_scale_is_mean_squared_hidden_norm() {
    let f = fixture(7);
    let mut cfg = rmu_cfg();
    cfg.rmu_c = 1e-300; // effectively zero target while satisfying c > 0
    let s = &f.forget[0];
    let seq = full_sequence(s);
    let hidden = crate::model::representation(&f.state, &seq, cfg.rmu_layer).unwrap();
    let start = s.prompt.len();
    let rows = seq.len() - start;
    let mut want = 0.0;
    for i in start..seq.len() {
        want += hidden.row(i).iter().map(|x| x * x).sum::<f64>();
    }
    want /= rows as f64;

    let cache = RefCache::new();
    let target = vec![0.0; f.state.cfg.d_model];
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &f.state, false);
    let mut gb = GraphBuilder {
        tape: &mut tape,
        bound: &bound,
        model_cfg: &f.state.cfg,
        loss_cfg: &cfg,
        cache: &cache,
        rmu_target: Some(&target),
    };
    let node = gb.rmu_forget_node(s).unwrap();
    let got = tape.scalar_value(node);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn rmu_retain_equals_zero_at_original_model() {
    let f = fixture(8);
    let cfg = rmu_cfg();
    let batches = Batches {
        forget: &f.forget[..2],
        retain: &f.retain[..3],
        vn_forget: &[],
        vn_poison: &[],
    };
    let b = objective(&f.state, &f.refs, &cfg, Mode::Unlearn, &batches, &SeedRng::new(2)).unwrap();
    assert!(b.retain.abs() < 1e-12, "{}", b.retain);
}

#[test]
fn value_norm_terms_vanish_at_their_reference_models() {
    let f = fixture(9);
    let cfg = npo_cfg();
    let theta_u = f.refs.theta_u.clone().unwrap();

    // state == theta_u with an empty poison batch: forget term is exact zero.
    let b = objective(
        &theta_u,
        &f.refs,
        &cfg,
        Mode::BackdoorReg,
        &Batches {
            forget: &f.forget[..2],
            retain: &f.retain[..2],
            vn_forget: &f.forget[..3],
            vn_poison: &[],
        },
        &SeedRng::new(0),
    )
    .unwrap();
    assert_eq!(b.value_norm, 0.0);

    // state == theta_o with an empty forget batch: poison term is exact zero.
    let b = objective(
        &f.refs.theta_o,
        &f.refs,
        &cfg,
        Mode::BackdoorReg,
        &Batches {
            forget: &f.forget[..2],
            retain: &f.retain[..2],
            vn_forget: &[],
            vn_poison: &f.poisoned[..3],
        },
        &SeedRng::new(0),
    )
    .unwrap();
    assert_eq!(b.value_norm, 0.0);
}

#[test]
fn value_norm_matches_scalar_oracle_on_small_instance() {
    // 1 layer, 1 head, |S| = 2: hand-compute the squared norm differences.
    let spec = CorpusSpec {
        n_forget: 3,
        n_retain: 3,
        ..CorpusSpec::default()
    };
    let sr = SeedRng::new(11);
    let corpus = generate_corpus(&spec, &sr).unwrap();
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        vocab_size: 512,
        max_seq_len: 64,
        rmu_layer: 0,
    };
    let state = TransformerState::init(&cfg, &sr).unwrap();
    let theta_u = TransformerState::init(&cfg, &SeedRng::new(12)).unwrap();
    let refs = ReferenceModels {
        theta_o: state.clone(),
        theta_u: Some(theta_u.clone()),
    };
    let lcfg = LossConfig {
        sink_set: vec![1, 2],
        vn_layers: vec![0],
        rmu_layer: 0,
        ..LossConfig::default()
    };
    let forget = corpus.split_samples(Split::Forget);
    let batch = &forget[..2];

    let mut want = 0.0;
    for s in batch {
        let seq = full_sequence(s);
        let a = value_norms(&state, &seq, &[0], &[1, 2]).unwrap();
        let b = value_norms(&theta_u, &seq, &[0], &[1, 2]).unwrap();
        let mut d = 0.0;
        for (x, y) in a.iter().zip(&b) {
            d += (x - y) * (x - y);
        }
        want += d / 2.0;
    }
    want /= batch.len() as f64;

    let b = objective(
        &state,
        &refs,
        &lcfg,
        Mode::BackdoorReg,
        &Batches {
            forget: &forget[..1],
            retain: &corpus.split_samples(Split::Retain)[..1],
            vn_forget: batch,
            vn_poison: &[],
        },
        &SeedRng::new(0),
    )
    .unwrap();
    assert!((b.value_norm - want).abs() < 1e-12, "{} vs {want}", b.value_norm);
}

#[test]
fn value_norm_is_batch_order_invariant() {
    let f = fixture(13);
    let cfg = npo_cfg();
    let fwd: Vec<Sample> = f.forget[..4].to_vec();
    let mut rev = fwd.clone();
    rev.reverse();
    let run = |batch: &[Sample]| {
        objective(
            &f.state,
            &f.refs,
            &cfg,
            Mode::BackdoorReg,
            &Batches {
                forget: &f.forget[..1],
                retain: &f.retain[..1],
                vn_forget: batch,
                vn_poison: &f.poisoned[..2],
            },
            &SeedRng::new(0),
        )
        .unwrap()
        .value_norm
    };
    assert_eq!(run(&fwd).to_bits(), run(&rev).to_bits());
}

#[test]
fn doubling_lambda_doubles_the_vn_contribution() {
    let f = fixture(14);
    let mut cfg = npo_cfg();
    cfg.lambda = 3e-4;
    let batches = Batches {
        forget: &f.forget[..2],
        retain: &f.retain[..2],
        vn_forget: &f.forget[..2],
        vn_poison: &f.poisoned[..2],
    };
    let b1 = objective(&f.state, &f.refs, &cfg, Mode::BackdoorReg, &batches, &SeedRng::new(0)).unwrap();
    cfg.lambda *= 2.0;
    let b2 = objective(&f.state, &f.refs, &cfg, Mode::BackdoorReg, &batches, &SeedRng::new(0)).unwrap();
    assert_eq!(b1.value_norm.to_bits(), b2.value_norm.to_bits());
    let c1 = 3e-4 * b1.value_norm;
    let c2 = 6e-4 * b2.value_norm;
    assert_eq!((2.0 * c1).to_bits(), c2.to_bits());
    assert!(b1.value_norm > 0.0, "fixture should have nonzero vn loss");
}

#[test]
fn mode_identities() {
    let f = fixture(15);
    let mut cfg = npo_cfg();

    // lambda = 0 in backdoor_reg reduces to backdoor exactly.
    cfg.lambda = 0.0;
    cfg.sink_set = vec![1];
    let batches = Batches {
        forget: &f.forget[..3],
        retain: &f.retain[..3],
        vn_forget: &f.forget[..1],
        vn_poison: &f.poisoned[..1],
    };
    let reg = objective(&f.state, &f.refs, &cfg, Mode::BackdoorReg, &batches, &SeedRng::new(0)).unwrap();
    let plain = objective(&f.state, &f.refs, &cfg, Mode::Backdoor, &batches, &SeedRng::new(0)).unwrap();
    assert_eq!(reg.total.to_bits(), plain.total.to_bits());

    // Empty D_p in backdoor mode is identical to unlearn mode.
    let batches = Batches {
        forget: &f.forget[..3],
        retain: &f.retain[..3],
        vn_forget: &[],
        vn_poison: &[],
    };
    let bd = objective(&f.state, &f.refs, &cfg, Mode::Backdoor, &batches, &SeedRng::new(0)).unwrap();
    let ul = objective(&f.state, &f.refs, &cfg, Mode::Unlearn, &batches, &SeedRng::new(0)).unwrap();
    assert_eq!(bd.total.to_bits(), ul.total.to_bits());

    // gamma = 0 in unlearn mode at theta_o reduces to the NPO reference value.
    cfg.gamma = 0.0;
    let b = objective(&f.state, &f.refs, &cfg, Mode::Unlearn, &batches, &SeedRng::new(0)).unwrap();
    assert!((b.total - (2.0 / 0.7) * 2.0f64.ln()).abs() < 1e-9);
}

#[test]
fn unlearn_mode_rejects_poison_and_reg_requires_theta_u() {
    let f = fixture(16);
    let cfg = npo_cfg();
    let err = objective(
        &f.state,
        &f.refs,
        &cfg,
        Mode::Unlearn,
        &Batches {
            forget: &f.forget[..1],
            retain: &f.retain[..1],
            vn_forget: &[],
            vn_poison: &f.poisoned[..1],
        },
        &SeedRng::new(0),
    )
    .unwrap_err();
    assert!(matches!(err, LossError::Config(_)));

    let refs_no_u = ReferenceModels {
        theta_o: f.refs.theta_o.clone(),
        theta_u: None,
    };
    let err = objective(
        &f.state,
        &refs_no_u,
        &cfg,
        Mode::BackdoorReg,
        &Batches {
            forget: &f.forget[..1],
            retain: &f.retain[..1],
            vn_forget: &f.forget[..1],
            vn_poison: &f.poisoned[..1],
        },
        &SeedRng::new(0),
    )
    .unwrap_err();
    assert!(err.to_string().contains("theta_u"));
}

fn grads_for(
    f: &Fixture,
    cfg: &LossConfig,
    mode: Mode,
    batches: &Batches<'_>,
    seed: &SeedRng,
) -> Vec<Vec<f64>> {
    let method = lookup_method(&cfg.method).unwrap();
    let mut cache = RefCache::new();
    method
        .prepare_refs(&mut cache, &f.refs, cfg, batches.forget, batches.retain)
        .unwrap();
    if mode == Mode::BackdoorReg {
        cache.prepare_vn(&f.refs, cfg, batches.vn_forget, batches.vn_poison).unwrap();
    }
    let rmu_target: Option<Vec<f64>> = if cfg.method == "rmu" {
        let mut v = rmu_direction(seed, f.state.cfg.d_model);
        for x in &mut v {
            *x *= cfg.rmu_c;
        }
        Some(v)
    } else {
        None
    };
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &f.state, true);
    let mut gb = GraphBuilder {
        tape: &mut tape,
        bound: &bound,
        model_cfg: &f.state.cfg,
        loss_cfg: cfg,
        cache: &cache,
        rmu_target: rmu_target.as_deref(),
    };
    let (total, _, _, _) = objective_graph(&mut gb, mode, batches).unwrap();
    tape.backward(total).unwrap();
    bound.ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect()
}

fn fd_check(f: &Fixture, cfg: &LossConfig, mode: Mode, batches: &Batches<'_>) {
    let seed = SeedRng::new(0);
    let grads = grads_for(f, cfg, mode, batches, &seed);
    // An 8-coordinate slice across distinct parameters.
    let n_params = f.state.param_buffers().len();
    let picks: Vec<(usize, usize)> = (0..8)
        .map(|k| {
            let p = (k * 5 + 2) % n_params;
            let len = f.state.param_buffers()[p].len();
            (p, (k * 37 + 11) % len)
        })
        .collect();
    for (p, j) in picks {
        let h = 1e-5;
        let eval = |v: f64| {
            let mut st = f.state.clone();
            st.param_buffers_mut()[p][j] = v;
            objective(&st, &f.refs, cfg, mode, batches, &seed).unwrap().total
        };
        let x0 = f.state.param_buffers()[p][j];
        let fd = gradcheck::central_diff(x0, h, eval);
        let got = grads[p][j];
        let err = gradcheck::rel_err(got, fd);
        assert!(err < 1e-4, "param {p}[{j}]: grad {got} vs fd {fd} (rel {err})");
    }
}

#[test]
fn npo_composite_gradient_matches_finite_differences() {
    let f = fixture(17);
    let cfg = npo_cfg();
    let batches = Batches {
        forget: &f.forget[..2],
        retain: &f.retain[..2],
        vn_forget: &f.forget[..2],
        vn_poison: &f.poisoned[..2],
    };
    fd_check(&f, &cfg, Mode::BackdoorReg, &batches);
}

#[test]
fn rmu_composite_gradient_matches_finite_differences() {
    let f = fixture(18);
    let cfg = rmu_cfg();
    let batches = Batches {
        forget: &f.forget[..2],
        retain: &f.retain[..2],
        vn_forget: &[],
        vn_poison: &[],
    };
    fd_check(&f, &cfg, Mode::Backdoor, &batches);
}

#[test]
fn train_zero_steps_returns_init_unchanged() {
    let f = fixture(19);
    let sched = TrainSchedule {
        steps: 0,
        lr: 1e-3,
        batch_size: 2,
        weight_decay: 0.0,
        loss_target: None,
    };
    let data = TrainData {
        forget: f.forget.clone(),
        retain: f.retain.clone(),
        poisoned: vec![],
    };
    let (out, log) = train(
        f.state.clone(),
        &f.refs,
        &data,
        &npo_cfg(),
        Mode::Unlearn,
        &sched,
        &SeedRng::new(1),
    )
    .unwrap();
    assert!(out.bit_eq(&f.state));
    assert!(log.is_empty());
}

#[test]
fn train_is_deterministic_and_leaves_references_untouched() {
    let f = fixture(20);
    let sched = TrainSchedule {
        steps: 6,
        lr: 1e-3,
        batch_size: 2,
        weight_decay: 0.0,
        loss_target: None,
    };
    let data = TrainData {
        forget: f.forget.clone(),
        retain: f.retain.clone(),
        poisoned: f.poisoned.clone(),
    };
    let before_o = f.refs.theta_o.clone();
    let before_u = f.refs.theta_u.clone().unwrap();
    let run = || {
        train(
            f.state.clone(),
            &f.refs,
            &data,
            &npo_cfg(),
            Mode::BackdoorReg,
            &sched,
            &SeedRng::new(2),
        )
        .unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a.bit_eq(&b));
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
    assert!(f.refs.theta_o.bit_eq(&before_o));
    assert!(f.refs.theta_u.as_ref().unwrap().bit_eq(&before_u));
    assert!(!a.bit_eq(&f.state), "training must move the parameters");
}

#[test]
fn pretrain_decreases_loss_and_stops_at_target() {
    let spec = CorpusSpec {
        n_forget: 4,
        n_retain: 4,
        ..CorpusSpec::default()
    };
    let sr = SeedRng::new(21);
    let corpus = generate_corpus(&spec, &sr).unwrap();
    let cfg = tiny_cfg(512);
    let state = TransformerState::init(&cfg, &sr).unwrap();
    let sched = TrainSchedule {
        steps: 220,
        lr: 3e-3,
        batch_size: 4,
        weight_decay: 0.0,
        loss_target: None,
    };
    let (_, log) = pretrain(state, &corpus.samples, &corpus.filler_ids, &sched, &sr).unwrap();
    let head: f64 = log[..10].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    let tail: f64 = log[log.len() - 10..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    assert!(tail < head * 0.5, "loss should drop: {head} -> {tail}");
}
