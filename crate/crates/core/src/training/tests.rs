use super::*;
use crate::attention::HeadGeometry;
use crate::model::{encode_bytes, toy_corpus, ModelConfig};
use crate::numerics::grad_check_many;
use crate::rope::RopeConfig;
use crate::surgery::{attach_lora, perform_surgery, PostRope, Selection, SurgeryPlan};

fn cfg(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab: 128,
        d_model: 16,
        n_layers: layers,
        geom: HeadGeometry {
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 1,
            d_qk: 16,
            d_vo: 8,
        },
        d_ffn: 32,
        rope: RopeConfig::standard(10000.0, 16),
        max_seq: 32,
    }
}

fn corpus() -> Corpus {
    Corpus::from_text(&toy_corpus(1, 60), 17, 0.1).unwrap()
}

fn bits<T: Scalar>(m: &Model<T>) -> Vec<u64> {
    m.params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().map(|v| v.as_f64().to_bits()))
        .collect()
}

fn student_of(teacher: &Model<f64>, d_qk: usize, d_vo: usize, rope: PostRope) -> Model<f64> {
    let plan = SurgeryPlan {
        d_qk,
        d_vo,
        selection: Selection::Strided,
        rope,
        lora: Some((2, 4.0)),
        seed: 9,
    };
    perform_surgery(teacher, &plan).unwrap().0
}

#[test]
fn trace_shapes_and_determinism() {
    let t = Model::<f64>::random(cfg(1), 1).unwrap();
    let batch = vec![vec![1, 2, 3, 4], vec![5, 6, 7]];
    let tr = teacher_trace(&t, &batch).unwrap();
    assert_eq!(tr.states[0].len(), 2);
    assert_eq!(tr.states[1][1].shape(), &[3, 16]);
    assert_eq!(tr, teacher_trace(&t, &batch).unwrap());
    assert_eq!(stage1_loss(&tr, &t).unwrap(), 0.0);
}

#[test]
fn stage1_unit_offset_gives_one() {
    let m = Model::<f64>::random(cfg(3), 2).unwrap();
    let (_, mut states) = m.forward_with_hidden(&[3, 1, 4, 1, 5]).unwrap();
    // target of every layer is the block output on the given input, plus 1
    for l in 0..3 {
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, &|_| false);
        let x = tape.constant(states[l].clone());
        let y = m.block_tape(&mut tape, &vars.blocks[l], x).unwrap();
        states[l + 1] = tape.value(y).map(|v| v + 1.0);
    }
    let loss = stage1_loss(&DistillTrace { states: vec![states] }, &m).unwrap();
    assert!((loss - 1.0).abs() < 1e-12, "{loss}");
}

#[test]
fn stage1_matches_loop_oracle() {
    let teacher = Model::<f64>::random(cfg(2), 3).unwrap();
    let student = student_of(&teacher, 8, 4, PostRope::FrequencyAware);
    let seq = [7usize, 8, 9, 10, 11, 12];
    let tr = teacher_trace(&teacher, &[seq.to_vec()]).unwrap();
    let got = stage1_loss(&tr, &student).unwrap();

    let states = &tr.states[0];
    let mut oracle = 0.0;
    for l in 0..2 {
        let mut tape = Tape::new();
        let vars = student.register(&mut tape, &|_| false);
        let x = tape.constant(states[l].clone());
        let y = student.block_tape(&mut tape, &vars.blocks[l], x).unwrap();
        let out = tape.value(y);
        let mut acc = 0.0;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let d = states[l + 1].get(r, c) - out.get(r, c);
                acc += d * d;
            }
        }
        oracle += acc / (out.rows() * out.cols()) as f64;
    }
    oracle /= 2.0;
    assert!(got > 0.0);
    assert!((got - oracle).abs() < 1e-7, "{got} vs {oracle}");
}

#[test]
fn stage1_gradient_matches_finite_differences() {
    let teacher = Model::<f64>::random(cfg(2), 4).unwrap();
    let mut student = student_of(&teacher, 8, 4, PostRope::FrequencyAware);
    for b in &mut student.blocks {
        let l = b.lora.as_mut().unwrap();
        l.up.b = l.up.b.map(|_| 0.1);
    }
    let tr = teacher_trace(&teacher, &[vec![1, 9, 2, 8, 3]]).unwrap();
    let names = ["blocks.0.attn.w_q", "blocks.1.attn.w_v", "blocks.1.lora.up.a"];
    let idx: Vec<usize> = student
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| names.contains(&p.name.as_str()))
        .map(|(i, _)| i)
        .collect();
    let inputs: Vec<Tensor<f64>> = idx.iter().map(|&i| student.params()[i].tensor.clone()).collect();
    let err = grad_check_many(
        |tape: &mut Tape<f64>, xs: &[Var]| {
            let mut s = student.clone();
            for (&i, x) in idx.iter().zip(xs) {
                *s.params_mut()[i].tensor = tape.value(*x).clone();
            }
            let vars = s.register(tape, &|_| false);
            let mut ordered = vars.ordered();
            for (&i, &x) in idx.iter().zip(xs) {
                ordered[i] = x;
            }
            let vars = remap(&vars, &ordered);
            Ok(stage1_loss_tape(tape, &s, &vars, &tr.states[0]).expect("loss"))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn remap(v: &ModelVars, ordered: &[Var]) -> ModelVars {
    let mut it = ordered.iter().copied();
    let mut next = || it.next().unwrap();
    let embed = next();
    let blocks = v
        .blocks
        .iter()
        .map(|b| {
            let attn_norm = next();
            let attention = crate::attention::AttentionVars {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
            };
            let (ffn_norm, gate, up, down) = (next(), next(), next(), next());
            let lora = b.lora.map(|l| l.map(|(_, _, s)| (next(), next(), s)));
            crate::model::BlockVars {
                attn_norm,
                attention,
                ffn_norm,
                gate,
                up,
                down,
                lora,
            }
        })
        .collect();
    ModelVars {
        embed,
        blocks,
        final_norm: next(),
        unembed: next(),
    }
}

#[test]
fn ntp_uniform_and_hand_computed() {
    let mut m = Model::<f64>::random(cfg(1), 5).unwrap();
    m.unembed = m.unembed.map(|_| 0.0);
    let l = ntp_loss(&m, &[vec![1, 2, 3], vec![4, 5]]).unwrap();
    assert!((l - 128f64.ln()).abs() < 1e-12);

    let m = Model::<f64>::random(cfg(1), 6).unwrap();
    let seq = vec![10usize, 20, 30];
    let logits = m.forward(&seq[..2]).unwrap();
    let mut want = 0.0;
    for (r, &t) in [20usize, 30].iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want += -(row[t].exp() / z).ln();
    }
    want /= 2.0;
    assert!((ntp_loss(&m, &[seq]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn ntp_confident_logits_go_to_zero() {
    let mut t = Tensor::<f64>::zeros(&[1, 128]);
    t.set(0, 7, 1e3);
    let mut tape = Tape::new();
    let logits = tape.constant(t);
    let ce = tape.cross_entropy(logits, &[7]).unwrap();
    assert!(tape.scalar(ce) < 1e-12);
}

#[test]
fn kl_properties_and_direct_sum() {
    let a = Model::<f64>::random(cfg(1), 7).unwrap();
    let b = Model::<f64>::random(cfg(1), 8).unwrap();
    let batch = vec![vec![1, 2, 3, 4], vec![9, 8, 7]];
    assert_eq!(kl_loss(&a, &a, &batch, KlDirection::ReferenceFirst).unwrap(), 0.0);
    for dir in [KlDirection::ReferenceFirst, KlDirection::ModelFirst] {
        assert!(kl_loss(&b, &a, &batch, dir).unwrap() > 0.0);
    }

    let p = [0.1, 0.2, 0.3, 0.25, 0.15];
    let z = [0.3f64, -1.0, 2.0, 0.5, 0.0];
    let zs: f64 = z.iter().map(|v| v.exp()).sum();
    let q: Vec<f64> = z.iter().map(|v| v.exp() / zs).collect();
    let want: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![1, 5], z.to_vec()).unwrap());
    let kl = tape
        .kl_div(
            logits,
            Tensor::new(vec![1, 5], p.to_vec()).unwrap(),
            KlDirection::ReferenceFirst,
        )
        .unwrap();
    assert!((tape.scalar(kl) - want).abs() < 1e-9);
}

#[test]
fn losses_ignore_batch_order() {
    let a = Model::<f32>::random(cfg(1), 7).unwrap();
    let b = Model::<f32>::random(cfg(1), 8).unwrap();
    let batch = vec![vec![1, 2, 3, 4], vec![9, 8, 7], vec![5, 5, 5, 5, 5]];
    let rev: Vec<_> = batch.iter().rev().cloned().collect();
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
    assert!(close(ntp_loss(&a, &batch).unwrap(), ntp_loss(&a, &rev).unwrap()));
    let d = KlDirection::ReferenceFirst;
    assert!(close(
        kl_loss(&a, &b, &batch, d).unwrap(),
        kl_loss(&a, &b, &rev, d).unwrap()
    ));
}

fn quick(stage: Stage, steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        lr,
        batch: 4,
        threads: 2,
        ..TrainConfig::new(stage)
    }
}

#[test]
fn zero_steps_and_zero_lr() {
    let teacher = Model::<f32>::random(cfg(2), 1).unwrap().cast::<f64>();
    let mut s = student_of(&teacher, 8, 4, PostRope::FrequencyAware);
    let before = s.clone();
    let log = run_stage2(&teacher, &mut s, &corpus(), &quick(Stage::TwoNtp, 0, 1e-3)).unwrap();
    assert!(log.rows.is_empty());
    assert_eq!(bits(&s), bits(&before));

    // lr 0: nothing moves, so the same batch scores identically
    let c = corpus();
    let one = Corpus {
        train: vec![c.train[0].clone()],
        held_out: c.held_out.clone(),
    };
    let log = run_stage1(&teacher, &mut s, &one, &quick(Stage::One, 5, 0.0)).unwrap();
    assert!(log.rows.iter().all(|r| r.loss == log.rows[0].loss && r.lr == 0.0));
    assert_eq!(bits(&s), bits(&before));
}

#[test]
fn only_attention_and_lora_move() {
    let teacher = Model::<f32>::random(cfg(2), 2).unwrap();
    let plan = SurgeryPlan {
        d_qk: 8,
        d_vo: 4,
        selection: Selection::Strided,
        rope: PostRope::FrequencyAware,
        lora: Some((2, 4.0)),
        seed: 1,
    };
    let mut s = perform_surgery(&teacher, &plan).unwrap().0;
    let before = s.clone();
    run_stage1(&teacher, &mut s, &corpus(), &quick(Stage::One, 3, 1e-2)).unwrap();
    run_stage2(&teacher, &mut s, &corpus(), &quick(Stage::TwoKl, 3, 1e-2)).unwrap();
    for (a, b) in s.params().iter().zip(before.params()) {
        let moved = a.tensor != b.tensor;
        match a.kind {
            ParamKind::Attention | ParamKind::Lora => assert!(moved, "{} did not move", a.name),
            _ => assert!(!moved, "{} moved", a.name),
        }
    }
}

#[test]
fn identity_student_stays_exact_without_decay() {
    let teacher = Model::<f32>::random(cfg(2), 3).unwrap();
    let mut s = teacher.clone();
    attach_lora(&mut s, 2, 4.0, 0).unwrap();
    let mut c = quick(Stage::One, 5, 1e-2);
    c.adamw.weight_decay = 0.0;
    let log = run_stage1(&teacher, &mut s, &corpus(), &c).unwrap();
    assert!(log.rows.iter().all(|r| r.loss == 0.0), "{:?}", log.rows);
}

#[test]
fn stage2_loss_falls_on_toy_corpus() {
    let text = toy_corpus(3, 200);
    let c = Corpus::from_text(&text, 17, 0.0).unwrap();
    let c = Corpus {
        train: c.train[..64].to_vec(),
        held_out: c.held_out,
    };
    let teacher = Model::<f32>::random(cfg(2), 4).unwrap();
    let mut s = student_of(&teacher.cast(), 8, 4, PostRope::FrequencyAware).cast::<f32>();
    let log = run_stage2(&teacher, &mut s, &c, &quick(Stage::TwoNtp, 200, 3e-3)).unwrap();
    assert!(log.tail_mean(10).unwrap() < log.head_mean(10).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let mut a = Model::<f32>::random(cfg(1), 5).unwrap();
    let mut b = a.clone();
    let c = corpus();
    let la = pretrain(
        &mut a,
        &c,
        &TrainConfig {
            threads: 1,
            ..quick(Stage::Pretrain, 4, 1e-2)
        },
    )
    .unwrap();
    let lb = pretrain(
        &mut b,
        &c,
        &TrainConfig {
            threads: 3,
            ..quick(Stage::Pretrain, 4, 1e-2)
        },
    )
    .unwrap();
    assert_eq!(la, lb);
    assert_eq!(bits(&a), bits(&b));
    assert!(la.to_csv().starts_with("step,loss,lr\n0,"));
}

#[test]
fn divergence_reports_step() {
    let teacher = Model::<f32>::random(cfg(1), 6).unwrap();
    let mut s = teacher.clone();
    attach_lora(&mut s, 2, 4.0, 0).unwrap();
    s.blocks[0].attention.w_q.data_mut()[0] = f32::NAN;
    match run_stage2(&teacher, &mut s, &corpus(), &quick(Stage::TwoNtp, 3, 1e-3)) {
        Err(TrainError::Divergence { step: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_checks() {
    let t = Model::<f32>::random(cfg(1), 6).unwrap();
    let mut s = t.clone();
    assert!(run_stage1(&t, &mut s, &corpus(), &quick(Stage::TwoNtp, 1, 1e-3)).is_err());
    assert!(matches!(
        run_stage1(&t, &mut s, &corpus(), &quick(Stage::One, 1, -1.0)),
        Err(TrainError::Config(_))
    ));
    let other = Model::<f32>::random(cfg(2), 6).unwrap();
    assert!(matches!(
        run_stage1(&other, &mut s, &corpus(), &quick(Stage::One, 1, 1e-3)),
        Err(TrainError::Mismatch(_))
    ));
    let m = TrainConfig::new(Stage::TwoKl).manifest();
    assert!(m.contains("lr=0.0000200000000\n"));
    assert!(m.contains("kl_direction=teacher_student\n"));
    assert_eq!(encode_bytes("ab"), vec![97, 98]);
}
