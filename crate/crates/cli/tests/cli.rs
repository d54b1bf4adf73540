use std::path::Path;
use std::process::{Command, Output};

use kv_latent::rope::ideal_curve;

/// Runs `kvl` with whitespace-separated arguments in `dir`.
fn kvl(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvl"))
        .args(args.split_whitespace())
        .current_dir(dir)
        .output()
        .expect("spawn kvl")
}

fn ok(dir: &Path, args: &str) -> String {
    let out = kvl(dir, args);
    assert!(
        out.status.success(),
        "kvl {args}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn csv_column(text: &str, col: usize) -> Vec<f64> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

/// Tiny teacher pretrained on a small toy corpus, in `dir`.
fn tiny_teacher(dir: &Path) {
    ok(dir, "toy-corpus --out corpus.txt --paragraphs 200");
    ok(
        dir,
        "init --out teacher.ckpt --d-model 32 --layers 2 --heads 2 --kv-heads 1 --dqk 16 --dvo 16 --ffn 64 --seed 1",
    );
    ok(
        dir,
        "pretrain --model teacher.ckpt --corpus corpus.txt --steps 60 --lr 3e-3 --max-windows 40",
    );
}

fn log_ppl(dir: &Path, model: &str) -> f64 {
    let out = ok(dir, &format!("eval --model {model} --corpus corpus.txt --csv"));
    assert!(out.starts_with("split,windows,tokens,log_ppl\n"));
    csv_column(&out, 3)[0]
}

fn tail_swing(v: &[f64]) -> f64 {
    let tail = &v[v.len() * 3 / 4..];
    tail.iter().cloned().fold(f64::MIN, f64::max) - tail.iter().cloned().fold(f64::MAX, f64::min)
}

#[test]
fn budget_halves_cache_at_64_64() {
    let dir = tempfile::tempdir().unwrap();
    let args = "budget --layers 32 --kv-heads 8 --dqk 64 --dvo 64 --dtype bf16";
    let text = ok(dir.path(), args);
    assert!(text.contains("1/2 = 0.500000000"), "{text}");
    let csv = ok(dir.path(), &format!("{args} --csv"));
    let header = csv.lines().next().unwrap();
    let ratio = header.split(',').position(|h| h == "ratio").unwrap();
    assert_eq!(csv_column(&csv, ratio), vec![0.5]);
}

#[test]
fn budget_text_documents_published_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), "budget --dqk 64 --dvo 128");
    assert!(text.contains("172 MB") && text.contains("192 MB"), "{text}");
}

#[test]
fn rope_curve_at_huge_dim_starts_at_one() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        "rope-curve --theta 10000 --dim 100000 --max-pos 8192 --out c.csv",
    );
    let text = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(text.starts_with("pos,value\n0,1.00000000\n"));
    let values = csv_column(&text, 1);
    assert_eq!(values.len(), 8192);
    assert_eq!(values[0], 1.0);
}

#[test]
fn freq_aware_csv_has_fewer_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let negatives = |mode: &str| {
        let text = ok(dir.path(), &format!("rope-curve --dim 16 --mode {mode}"));
        csv_column(&text, 1).iter().filter(|v| **v < 0.0).count()
    };
    let (std, fa) = (negatives("standard"), negatives("freq-aware"));
    assert!(fa < std, "freq-aware {fa} vs standard {std}");
}

#[test]
fn high_band_matches_direct_sum() {
    let dir = tempfile::tempdir().unwrap();
    let values = csv_column(&ok(dir.path(), "rope-curve --dim 256 --band 193:256"), 1);
    // channels 193..=256 are pairs 97..=128 of θ_j = 10000^{-(j-1)/128}
    for (x, v) in values.iter().enumerate().step_by(97) {
        let direct: f64 = (97..=128)
            .map(|j| (x as f64 * 10000f64.powf(-((j - 1) as f64) / 128.0)).cos())
            .sum::<f64>()
            / 32.0;
        assert!(
            (v - direct).abs() <= 1e-8 * direct.abs().max(1e-3),
            "x={x}: {v} vs {direct}"
        );
    }
    let low = csv_column(&ok(dir.path(), "rope-curve --dim 256 --band 1:64"), 1);
    let (hi_swing, lo_swing) = (tail_swing(&values), tail_swing(&low));
    assert!(
        hi_swing < 0.1 && hi_swing * 10.0 < lo_swing,
        "high band {hi_swing} vs low band {lo_swing}"
    );
}

#[test]
fn ideal_column_matches_library_quadrature() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(
        dir.path(),
        "rope-curve --dim 64 --max-pos 600 --ideal --ideal-steps 4000",
    );
    assert!(text.starts_with("pos,value,ideal\n"));
    let ideal = csv_column(&text, 2);
    for x in [0usize, 1, 10, 100, 599] {
        let want = ideal_curve(10000.0, x as f64, 100_000);
        assert!((ideal[x] - want).abs() < 1e-8, "x={x}: {} vs {want}", ideal[x]);
    }
}

#[test]
fn rope_curve_writes_gnuplot_script() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        "rope-curve --dim 16 --max-pos 64 --ideal --out c.csv --gnuplot c.gp",
    );
    let script = std::fs::read_to_string(dir.path().join("c.gp")).unwrap();
    assert!(script.contains("plot 'c.csv' using 1:2 with lines, '' using 1:3 with lines"));
}

#[test]
fn train_zero_steps_leaves_checkpoint_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_teacher(d);
    ok(
        d,
        "surgery --in teacher.ckpt --out cut.ckpt --dqk 8 --dvo 8 --lora-rank 4",
    );
    for stage in ["1", "2"] {
        ok(
            d,
            &format!(
                "train --stage {stage} --teacher teacher.ckpt --student cut.ckpt --out zero{stage}.ckpt \
                 --corpus corpus.txt --steps 0 --log zero.csv"
            ),
        );
        let out = std::fs::read(d.join(format!("zero{stage}.ckpt"))).unwrap();
        assert_eq!(std::fs::read(d.join("cut.ckpt")).unwrap(), out);
    }
    assert_eq!(std::fs::read_to_string(d.join("zero.csv")).unwrap(), "step,loss,lr\n");
}

#[test]
fn pipeline_recovers_surgical_student() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_teacher(d);
    ok(
        d,
        "surgery --in teacher.ckpt --out student.ckpt --dqk 8 --dvo 8 --lora-rank 4 --report report.json",
    );
    let report = std::fs::read_to_string(d.join("report.json")).unwrap();
    assert!(report.contains("\"qk_indices\""));
    let teacher = log_ppl(d, "teacher.ckpt");
    let cut = log_ppl(d, "student.ckpt");
    assert!(cut > teacher, "surgery should hurt: {cut} vs {teacher}");
    let common = "--teacher teacher.ckpt --student student.ckpt --corpus corpus.txt --lr 1e-3";
    ok(d, &format!("train --stage 1 --steps 40 --log s1.csv {common}"));
    ok(
        d,
        &format!("train --stage 2 --loss kl --steps 40 --manifest m.txt {common}"),
    );
    let recovered = log_ppl(d, "student.ckpt");
    assert!(recovered < cut, "recovered {recovered} vs cut {cut}");
    let manifest = std::fs::read_to_string(d.join("m.txt")).unwrap();
    assert!(manifest.contains("stage=two_kl\n") && manifest.contains("kl_direction=teacher_student\n"));
    assert_eq!(std::fs::read_to_string(d.join("s1.csv")).unwrap().lines().count(), 41);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &str| kvl(d, args).status.code();

    assert_eq!(code("rope-curve"), Some(2), "missing flag");
    assert_eq!(code("rope-curve --dim 12 --mode freq-aware"), Some(2));
    assert_eq!(code("rope-curve --dim 16 --band 2:4"), Some(2));
    assert_eq!(code("budget --dqk 256"), Some(2), "above baseline");
    assert_eq!(code("eval --model missing.ckpt --corpus missing.txt"), Some(4));

    tiny_teacher(d);
    let mut bytes = std::fs::read(d.join("teacher.ckpt")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(d.join("corrupt.ckpt"), bytes).unwrap();
    assert_eq!(code("eval --model corrupt.ckpt --corpus corpus.txt"), Some(4));

    assert_eq!(code("surgery --in teacher.ckpt --out x.ckpt --dqk 6 --dvo 8"), Some(2));
    ok(d, "surgery --in teacher.ckpt --out cut.ckpt --dqk 8 --dvo 8");
    let out = kvl(
        d,
        "train --stage 2 --teacher teacher.ckpt --student cut.ckpt --out bad.ckpt --corpus corpus.txt \
         --steps 3 --lr 1e30",
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("bad.ckpt").exists());
}
