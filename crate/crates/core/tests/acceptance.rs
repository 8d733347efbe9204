//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attnseg::attention::{class_slice, self_power, AggregatedAttention};
use attnseg::eval::{confusion, miou, uncertainty_ce, Logits, Reduction};
use attnseg::fixtures::RandomScenes;
use attnseg::mask::{decide, ObjectnessField, SegMask};
use attnseg::matrix::Matrix;
use attnseg::pipeline::{
    fixture_container_dirs, make_fixture_dir, run_generate, score_case, PipelineConfig, REPORT_FILE,
};
use attnseg::prompt::{append_classes, plan_dataset, simple_prompt, ClassVocabulary, VocabEntry};
use attnseg::store::{
    read_container, write_container, AttentionRecord, ClassEntry, Grid, ImageSize, RecordDescriptor,
    RunManifest, TokenSpan,
};
use attnseg::{Error, BACKGROUND, UNCERTAIN};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen::<f32>()).collect()).unwrap();
    m.renormalize_rows(0.0);
    m
}

fn exponentiation() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sizes = [16usize, 64, 256];
    let mut worst = 0f64;
    for i in 0..200 {
        let n = sizes[i % sizes.len()];
        let m = random_stochastic(n, &mut rng);
        check(self_power(&m, 0).unwrap() == Matrix::identity(n), || format!("tau 0 not identity (n {n})"))?;
        let one = self_power(&m, 1).unwrap().max_abs_diff(&m);
        check(one <= 1e-7, || format!("tau 1 differs by {one:e}"))?;
        let mut naive = m.clone();
        for tau in 2..=5u32 {
            naive = naive.matmul(&m).unwrap();
            let diff = self_power(&m, tau).unwrap().max_abs_diff(&naive);
            worst = worst.max(diff);
            check(diff <= 1e-5, || format!("n {n} tau {tau}: max abs diff {diff:e}"))?;
        }
    }
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("200 matrices, worst diff {worst:.1e}, {:.1}s", elapsed.as_secs_f64()))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn subset_softmax() -> Outcome {
    const TOKENS: usize = 77;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for i in 0..1000 {
        let m = 1 + i % 5;
        let logits: Vec<f64> = (0..TOKENS).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut tokens = BTreeSet::new();
        while tokens.len() < m {
            tokens.insert(rng.gen_range(1..TOKENS));
        }
        let tokens: Vec<usize> = tokens.into_iter().collect();
        let classes: Vec<ClassEntry> = tokens
            .iter()
            .enumerate()
            .map(|(k, &t)| ClassEntry {
                class_id: k as u8 + 1,
                class_name: format!("c{k}"),
                token_span: TokenSpan { start: t as u32, end: t as u32 + 1 },
            })
            .collect();
        let full: Vec<f32> = softmax(&logits).into_iter().map(|v| v as f32).collect();
        let grid = Grid::square(1);
        let manifest = RunManifest {
            image_id: format!("s{i}"),
            prompt: String::new(),
            class_prompt: String::new(),
            classes,
            num_layers: 1,
            num_timesteps: 1,
            image_size: ImageSize::new(1, 1),
            records: vec![RecordDescriptor::for_record(&AttentionRecord::new_cross(0, 0, grid, TOKENS as u32, full.clone()))],
            seed: 0,
        };
        let agg = AggregatedAttention {
            self_map: Matrix::identity(1),
            cross_map: Matrix::from_vec(1, TOKENS, full).unwrap(),
            self_grid: grid,
            cross_grid: grid,
            class_ids: Vec::new(),
        };
        let sliced = class_slice(&agg, &manifest).map_err(|e| e.to_string())?;
        let direct = softmax(&tokens.iter().map(|&t| logits[t]).collect::<Vec<_>>());
        for (got, want) in sliced.cross_map.row(0).iter().zip(&direct) {
            worst = worst.max((f64::from(*got) - want).abs());
        }
        check(worst <= 1e-6, || format!("vector {i} (M={m}): diff {worst:e}"))?;
    }
    Ok(format!("1000 vectors, worst diff {worst:.1e}"))
}

fn threshold_table() -> Outcome {
    let (alpha, beta) = (0.5f32, 0.6f32);
    let mut values: Vec<f32> = (0..=1000).map(|i| i as f32 / 1000.0).collect();
    values.extend([alpha, beta, f32::from_bits(alpha.to_bits() + 1), f32::from_bits(beta.to_bits() - 1)]);
    let field = ObjectnessField {
        width: values.len() as u32,
        height: 1,
        values: values.clone(),
        labels: vec![0; values.len()],
        legend: vec![7],
    };
    let mask = decide(&field, alpha, beta).map_err(|e| e.to_string())?;
    for (&v, &got) in values.iter().zip(mask.data()) {
        let want = if v <= alpha {
            BACKGROUND
        } else if v < beta {
            UNCERTAIN
        } else {
            7
        };
        check(got == want, || format!("V={v}: got {got}, want {want}"))?;
    }
    Ok(format!("{} values incl. boundaries", values.len()))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 1e-3;
    let mut worst = 0f64;
    for i in 0..50 {
        let (w, h) = (rng.gen_range(1..5u32), rng.gen_range(1..5u32));
        let c = rng.gen_range(2..6usize);
        let labels: Vec<u8> = (0..w * h)
            .map(|_| if rng.gen_bool(0.25) { UNCERTAIN } else { rng.gen_range(0..c as u8) })
            .collect();
        let target = SegMask::new(w, h, labels.clone(), (1..c as u8).collect()).map_err(|e| e.to_string())?;
        let mut logits = Logits {
            height: h,
            width: w,
            channels: c,
            data: (0..(w * h) as usize * c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        };
        let reduction = if i % 2 == 0 { Reduction::Sum } else { Reduction::Mean };
        let analytic = uncertainty_ce(&logits, &target, reduction).map_err(|e| e.to_string())?.gradient;
        let mut numeric = vec![0.0; analytic.len()];
        for k in 0..numeric.len() {
            let orig = logits.data[k];
            logits.data[k] = orig + eps;
            let up = uncertainty_ce(&logits, &target, reduction).unwrap().loss;
            logits.data[k] = orig - eps;
            let down = uncertainty_ce(&logits, &target, reduction).unwrap().loss;
            logits.data[k] = orig;
            numeric[k] = (up - down) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = if norm > 0.0 { diff / norm } else { diff };
        worst = worst.max(rel);
        check(rel <= 1e-4, || format!("instance {i}: relative error {rel:e}"))?;
        for (px, &l) in labels.iter().enumerate() {
            if l == UNCERTAIN {
                let g = &analytic[px * c..(px + 1) * c];
                check(g.iter().all(|&v| v == 0.0), || format!("instance {i}: non-zero gradient at uncertain pixel {px}"))?;
            }
        }
    }
    Ok(format!("50 instances, worst relative error {worst:.1e}"))
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases = make_fixture_dir(&RandomScenes::new(50, 7, 0.1).scenes(), dir.path()).map_err(|e| e.to_string())?;
    let mean = |tau: u32| -> Result<f64, String> {
        let cfg = PipelineConfig { tau, ..Default::default() };
        let mut total = 0.0;
        for case in &cases {
            total += score_case(case, &cfg, 20).map_err(|e| e.to_string())?.1.mean;
        }
        Ok(total / cases.len() as f64)
    };
    let refined = mean(4)?;
    let plain = mean(0)?;
    let elapsed = started.elapsed();
    let summary = format!("mIoU {refined:.4} at tau 4, {plain:.4} at tau 0, {:.1}s", elapsed.as_secs_f64());
    check(refined >= 0.90, || summary.clone())?;
    check(plain < refined, || summary.clone())?;
    check(elapsed < Duration::from_secs(300), || summary.clone())?;
    Ok(summary)
}

fn miou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..100 {
        let (w, h) = (rng.gen_range(1..24u32), rng.gen_range(1..24u32));
        let k = rng.gen_range(1..8u8);
        let include_background = i % 2 == 0;
        let pred: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..=k)).collect();
        let gt: Vec<u8> = (0..w * h)
            .map(|_| if rng.gen_bool(0.1) { UNCERTAIN } else { rng.gen_range(0..=k) })
            .collect();
        let cm = confusion(
            &SegMask::from_labels(w, h, pred.clone()).unwrap(),
            &SegMask::from_labels(w, h, gt.clone()).unwrap(),
            k,
            UNCERTAIN,
        )
        .map_err(|e| e.to_string())?;
        let first = u8::from(!include_background);
        let mut ious = Vec::new();
        for c in first..=k {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &g) in pred.iter().zip(&gt) {
                if g == UNCERTAIN {
                    continue;
                }
                inter += u64::from(p == c && g == c);
                union += u64::from(p == c || g == c);
            }
            if union > 0 {
                ious.push((c, inter as f64 / union as f64));
            }
        }
        match miou(&cm, include_background) {
            Ok(report) => {
                let got: Vec<(u8, f64)> = report.per_class.into_iter().collect();
                check(got == ious, || format!("pair {i}: per-class {got:?} vs {ious:?}"))?;
                let mean = ious.iter().map(|(_, v)| v).sum::<f64>() / ious.len() as f64;
                check(report.mean == mean, || format!("pair {i}: mean {} vs {mean}", report.mean))?;
            }
            Err(Error::UndefinedMean) => check(ious.is_empty(), || format!("pair {i}: spurious empty mean"))?,
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok("100 pairs exact".into())
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let fixtures = tempfile::tempdir().map_err(|e| e.to_string())?;
    make_fixture_dir(&RandomScenes::new(100, 1000, 0.1).scenes(), fixtures.path()).map_err(|e| e.to_string())?;
    let dirs = fixture_container_dirs(fixtures.path()).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    let serial = tempfile::tempdir().map_err(|e| e.to_string())?;
    let parallel = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, _) = run_generate(&cfg, &dirs, serial.path(), 1).map_err(|e| e.to_string())?;
    let (b, _) = run_generate(&cfg, &dirs, parallel.path(), 8).map_err(|e| e.to_string())?;
    check(a.failures() == 0 && b.failures() == 0, || "container failures".into())?;
    let mut files = 0;
    for row in &a.rows {
        let name = row.mask.clone().ok_or("missing mask")?;
        let x = fs::read(serial.path().join(&name)).map_err(|e| e.to_string())?;
        let y = fs::read(parallel.path().join(&name)).map_err(|e| e.to_string())?;
        check(x == y, || format!("{name} differs"))?;
        files += 1;
    }
    let read = |p: PathBuf| fs::read(p).unwrap_or_default();
    check(read(serial.path().join(REPORT_FILE)) == read(parallel.path().join(REPORT_FILE)), || "report differs".into())?;
    Ok(format!("{files} masks + report identical, {:.1}s", started.elapsed().as_secs_f64()))
}

fn round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = Grid::new(2, 3);
    let mut records = Vec::with_capacity(10_000);
    for i in 0..10_000u32 {
        let (layer, t) = (i % 100, i / 200);
        let row = |cols: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let mut v: Vec<f32> = (0..cols).map(|_| rng.gen::<f32>() + 1e-3).collect();
            let s: f32 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        records.push(if i % 200 < 100 {
            AttentionRecord::new_self(layer, t, grid, (0..6).flat_map(|_| row(6, &mut rng)).collect())
        } else {
            AttentionRecord::new_cross(layer, t, grid, 8, (0..6).flat_map(|_| row(8, &mut rng)).collect())
        });
    }
    let manifest = RunManifest {
        image_id: "roundtrip".into(),
        prompt: "p".into(),
        class_prompt: "c".into(),
        classes: vec![],
        num_layers: 100,
        num_timesteps: 50,
        image_size: ImageSize::new(4, 6),
        records: records.iter().map(RecordDescriptor::for_record).collect(),
        seed: 8,
    };
    write_container(&manifest, records.iter().cloned(), dir.path()).map_err(|e| e.to_string())?;
    let back = read_container(dir.path()).map_err(|e| e.to_string())?;
    let mut n = 0;
    for (want, got) in records.iter().zip(back.records()) {
        let got = got.map_err(|e| e.to_string())?;
        let same = want.data.iter().zip(&got.data).all(|(a, b)| a.to_bits() == b.to_bits())
            && (want.kind, want.layer, want.timestep, want.grid, want.token_count)
                == (got.kind, got.layer, got.timestep, got.grid, got.token_count);
        check(same, || format!("record {n} differs"))?;
        n += 1;
    }
    check(n == 10_000, || format!("read back {n} records"))?;

    // Corruptions, each checked on a fresh read.
    let descs = back.descriptors().to_vec();
    let blob = |k: usize| dir.path().join(&descs[k].file);

    let mut bytes = fs::read(blob(0)).unwrap();
    bytes[0] = b'X';
    fs::write(blob(0), &bytes).unwrap();
    let bad_magic = read_container(dir.path()).unwrap().load(&descs[0]);
    check(matches!(bad_magic, Err(Error::Format(_))), || format!("bad magic gave {bad_magic:?}"))?;

    let bytes = fs::read(blob(1)).unwrap();
    fs::write(blob(1), &bytes[..bytes.len() - 4]).unwrap();
    let truncated = read_container(dir.path()).unwrap().load(&descs[1]);
    check(truncated.is_err(), || "truncated blob accepted".into())?;

    let mut bytes = fs::read(blob(2)).unwrap();
    bytes[16..20].copy_from_slice(&0.9f32.to_le_bytes());
    bytes[20..24].copy_from_slice(&0.9f32.to_le_bytes());
    fs::write(blob(2), &bytes).unwrap();
    let payload = read_container(dir.path()).unwrap().load(&descs[2]);
    check(matches!(payload, Err(Error::NotRowStochastic { .. })), || format!("corrupt payload gave {payload:?}"))?;

    fs::remove_file(blob(3)).unwrap();
    let missing = read_container(dir.path()).unwrap().load(&descs[3]);
    check(matches!(missing, Err(Error::MissingBlob { .. })), || format!("missing blob gave {missing:?}"))?;

    let mut bad = records[0].clone();
    bad.data[0] += 0.5;
    let fresh = tempfile::tempdir().unwrap();
    let one = RunManifest { records: vec![RecordDescriptor::for_record(&bad)], ..manifest };
    let rejected = write_container(&one, [bad], fresh.path());
    check(matches!(rejected, Err(Error::NotRowStochastic { .. })), || format!("bad row sum gave {rejected:?}"))?;
    Ok("10000 records bit-exact; corrupt and bad-row-sum blobs rejected".into())
}

fn prompt_goldens() -> Outcome {
    let vocab = ClassVocabulary::new(
        ["bottle", "microwave", "sink", "refrigerator", "aeroplane", "boat"]
            .iter()
            .enumerate()
            .map(|(i, n)| VocabEntry { id: i as u8 + 1, name: n.to_string(), synonyms: vec![] })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let kitchen = append_classes("a photograph of a kitchen inside a house", &[1, 2, 3, 4], &vocab).map_err(|e| e.to_string())?;
    check(
        kitchen.prompt == "a photograph of a kitchen inside a house; bottle microwave sink refrigerator",
        || format!("kitchen prompt {:?}", kitchen.prompt),
    )?;
    let plane = append_classes("a large white plane sitting on top of a boat", &[5, 6], &vocab).map_err(|e| e.to_string())?;
    check(
        plane.prompt == "a large white plane sitting on top of a boat; aeroplane boat",
        || format!("plane prompt {:?}", plane.prompt),
    )?;

    let voc = ClassVocabulary::pascal_voc();
    let specs = voc.ids().into_iter().map(|id| simple_prompt(id, &voc)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let plan = plan_dataset(&specs, 2000, 0, &voc.ids()).map_err(|e| e.to_string())?;
    let incidences = plan.class_incidences();
    check(incidences >= 40_000, || format!("{incidences} incidences"))?;
    check(plan.per_class_counts.values().all(|&n| n >= 2000), || "a class is under target".into())?;
    Ok(format!("goldens verbatim; plan has {incidences} class incidences"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exponentiation oracle", exponentiation),
        ("subset-softmax equivalence", subset_softmax),
        ("three-way threshold table", threshold_table),
        ("uncertainty CE gradient", gradient_check),
        ("end-to-end fixture recovery", end_to_end),
        ("mIoU brute-force oracle", miou_oracle),
        ("1 vs 8 worker determinism", determinism),
        ("container round-trip", round_trip),
        ("prompt goldens and plan size", prompt_goldens),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
