//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::BufReader;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use layercache::cache::{derive_seed, scaled_prediction, train_cache, CacheArchitecture, CacheModel, Threshold};
use layercache::calibration::{calibrate, ThresholdReport};
use layercache::engine::{CacheEnabledModel, EvaluationReport, Exit};
use layercache::fixtures::{gaussian_vectors, mlp_chain, pretrain_backbone};
use layercache::gradcheck::{check_kl, check_layer, random_case};
use layercache::graph::BackboneGraph;
use layercache::medial::{collect, split, MedialDataset, Split, SplitRatios};
use layercache::samples::SampleSet;
use layercache::subset::oracle::{oracle_optimize, simulate};
use layercache::subset::{optimize, record_val_predictions, replay_subset, score_subset, subsets, ValRecord};
use layercache::tensor::{argmax, Tensor};
use layercache::train::TrainConfig;
use layercache_service::config::PipelineConfig;
use layercache_service::pipeline::{self, CalibrationArtifact, ToySizes};
use layercache_service::protocol::{read_frame, receive, send, write_frame, Request, Response, WireSample};
use layercache_service::server::Server;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// MLP fixtures

const FIXTURE_SEEDS: u64 = 20;
const FIXTURE_TOLERANCE: f64 = 0.05;
const INPUT: usize = 8;
const CLASSES: usize = 4;

struct MlpFixture {
    seed: u64,
    graph: BackboneGraph,
    caches: Vec<CacheModel>,
    uncalibrated: Vec<CacheModel>,
    reports: Vec<ThresholdReport>,
    mds: Vec<MedialDataset>,
    val: SampleSet,
    record: ValRecord,
}

/// Labels from a fixed random linear teacher, so the backbone has something
/// to learn.
fn labeled(n: usize, seed: u64) -> SampleSet {
    let x = gaussian_vectors(n, INPUT, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: Vec<f32> = (0..INPUT * CLASSES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n)
        .map(|i| {
            let row = x.inputs.row(i);
            let scores: Vec<f32> = w
                .chunks(INPUT)
                .map(|wc| wc.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect();
            argmax(&scores)
        })
        .collect();
    SampleSet::new(x.ids, x.inputs, Some(labels)).unwrap()
}

fn mlp_fixture(seed: u64) -> layercache::error::Result<MlpFixture> {
    let data = labeled(2000, seed);
    let train_rows: Vec<usize> = (0..1600).collect();
    let val_rows: Vec<usize> = (1600..2000).collect();
    let pre = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 8,
        seed,
        ..TrainConfig::default()
    };
    let graph = pretrain_backbone(
        &mlp_chain(INPUT, 16, 6, CLASSES, seed)?,
        &data.select(&train_rows),
        Some(&data.select(&val_rows)),
        &pre,
    )?;
    let traffic = gaussian_vectors(1000, INPUT, derive_seed(seed, 7))?;
    let candidates: Vec<_> = graph.identify_candidates(1).into_iter().take(3).collect();
    let mut mds = collect(&graph, &traffic.ids, &traffic.inputs, &candidates)?;
    let ratios = SplitRatios {
        train: 0.4,
        val: 0.512,
        test: 0.088,
    };
    for md in &mut mds {
        split(md, ratios, seed)?;
    }
    let arch = CacheArchitecture {
        convs: vec![],
        hidden: vec![16],
    };
    let mut caches = Vec::new();
    let mut uncalibrated = Vec::new();
    let mut reports = Vec::new();
    for (c, md) in candidates.iter().zip(&mds) {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 8,
            seed: derive_seed(seed, c.ordinal as u64),
            ..TrainConfig::default()
        };
        let mut cache = train_cache(&arch, md, c, &cfg)?;
        uncalibrated.push(cache.clone());
        reports.push(calibrate(&mut cache, md, FIXTURE_TOLERANCE)?);
        caches.push(cache);
    }
    let val = traffic.select(&mds[0].split_indices(Split::Val)?);
    let record = record_val_predictions(&caches, &mds)?;
    Ok(MlpFixture {
        seed,
        graph,
        caches,
        uncalibrated,
        reports,
        mds,
        val,
        record,
    })
}

// ---------------------------------------------------------------------------
// Criteria on the MLP fixtures

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let layers = 90;
    for i in 0..layers {
        let (spec, shape) = random_case(i, &mut rng);
        let check = check_layer(spec, &shape, &mut rng).map_err(fail)?;
        worst = worst.max(check.max_error());
        ensure(check.max_error() < 1e-2, || {
            format!("{:?} on {:?}: relative error {:.3e}", check.spec, check.input_shape, check.max_error())
        })?;
    }
    let losses = 50;
    for i in 0..losses {
        let (a, b) = check_kl(1 + i % 4, 2 + i % 9, &mut rng).map_err(fail)?;
        worst = worst.max(a).max(b);
        ensure(a < 1e-2 && b < 1e-2, || format!("kl instance {i}: {a:.3e} / {b:.3e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{layers} layer + {losses} loss instances, max relative error {worst:.2e}, {secs:.1}s"
    ))
}

fn criterion_2(fixtures: &[MlpFixture], build_secs: f64) -> Outcome {
    let start = Instant::now();
    let mut total_hits = 0;
    for f in fixtures {
        ensure(f.val.len() == 512, || format!("seed {}: {} validation samples", f.seed, f.val.len()))?;
        let all = subsets(&f.record.ordinals()).map_err(fail)?;
        ensure(all.len() == 8, || format!("{} subsets", all.len()))?;
        for (_, subset) in &all {
            let replay = replay_subset(&f.record, subset).map_err(fail)?;
            let sim = simulate(&f.graph, &f.caches, subset, &f.val).map_err(fail)?;
            let counts: Vec<(usize, usize)> = replay.iter().map(|r| (r.hits.len(), r.misses.len())).collect();
            ensure(counts == sim.counts, || {
                format!("seed {} subset {subset:?}: replay {counts:?} vs simulation {:?}", f.seed, sim.counts)
            })?;
            total_hits += counts.iter().map(|c| c.0).sum::<usize>();
        }
        let best = optimize(&f.record).map_err(fail)?.best;
        let (oracle_best, _) = oracle_optimize(&f.graph, &f.caches, &f.val).map_err(fail)?;
        ensure(best == oracle_best, || {
            format!("seed {}: optimize {best:?} vs oracle {oracle_best:?}", f.seed)
        })?;
    }
    let secs = build_secs + start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    ensure(total_hits > 0, || "no cache ever hit; fixture is degenerate".into())?;
    Ok(format!(
        "{} seeds x 8 subsets agree, {total_hits} hits replayed, {secs:.1}s",
        fixtures.len()
    ))
}

fn criterion_3(fixtures: &[MlpFixture]) -> Outcome {
    let mut checked = 0;
    let mut nonzero = 0;
    for f in fixtures {
        for (_, subset) in subsets(&f.record.ordinals()).map_err(fail)? {
            let replay = replay_subset(&f.record, &subset).map_err(fail)?;
            let k = score_subset(&f.record, &replay).map_err(fail)?;
            let sim = simulate(&f.graph, &f.caches, &subset, &f.val).map_err(fail)?;
            ensure(k == sim.flops_saved, || {
                format!("seed {} subset {subset:?}: K {k} vs saved {}", f.seed, sim.flops_saved)
            })?;
            checked += 1;
            nonzero += (k != 0) as usize;
        }
    }
    Ok(format!("{checked} subsets, {nonzero} with non-zero score, exact equality"))
}

fn check_bound(report: &ThresholdReport, what: &str) -> Result<bool, String> {
    match report.threshold {
        Threshold::Disabled => Ok(false),
        t => {
            let row = report.row_for(t).ok_or_else(|| format!("{what}: no grid row for {t:?}"))?;
            // wrong hits over samples is the exact form of HR * (1 - CA)
            let wrong = (row.hits - row.correct_hits) as f64 / report.samples as f64;
            ensure(wrong <= report.budget && row.bound <= report.budget, || {
                format!("{what}: bound {wrong} over budget {}", report.budget)
            })?;
            let product = row.hit_rate * (1.0 - row.cache_accuracy.unwrap_or(1.0));
            ensure((product - wrong).abs() < 1e-12, || format!("{what}: HR*(1-CA) {product} vs {wrong}"))?;
            Ok(true)
        }
    }
}

fn check_monotone(report: &ThresholdReport, what: &str) -> Result<(), String> {
    ensure(report.rows.len() == 101, || format!("{what}: {} grid rows", report.rows.len()))?;
    for w in report.rows.windows(2) {
        ensure(w[1].hit_rate <= w[0].hit_rate, || {
            format!("{what}: HR rises from {} to {} at theta {}", w[0].hit_rate, w[1].hit_rate, w[1].theta)
        })?;
    }
    Ok(())
}

fn criterion_4(fixtures: &[MlpFixture], toy: &[ThresholdReport]) -> Outcome {
    let mut assigned = 0;
    let mut total = 0;
    for f in fixtures {
        for r in &f.reports {
            assigned += check_bound(r, &format!("seed {} {}", f.seed, r.layer))? as usize;
            total += 1;
        }
    }
    for r in toy {
        assigned += check_bound(r, &format!("toy {}", r.layer))? as usize;
        total += 1;
    }
    ensure(assigned > 0, || "no cache received a threshold".into())?;
    Ok(format!("{assigned} of {total} caches thresholded, all within budget"))
}

fn criterion_8(fixtures: &[MlpFixture], toy: &[ThresholdReport]) -> Outcome {
    let mut samples = 0;
    let mut worst_increase = f64::NEG_INFINITY;
    for f in fixtures {
        for ((cache, raw), md) in f.caches.iter().zip(&f.uncalibrated).zip(&f.mds) {
            let idx = md.split_indices(Split::Val).map_err(fail)?;
            let logits = raw.logits(&md.activations.select_rows(&idx)).map_err(fail)?;
            for row in logits.rows() {
                ensure(scaled_prediction(row, cache.temperature).class == argmax(row), || {
                    format!("seed {} {}: argmax changed at tau {}", f.seed, cache.layer, cache.temperature)
                })?;
                samples += 1;
            }
        }
    }
    let reports = fixtures.iter().flat_map(|f| f.reports.iter()).chain(toy);
    let mut failures = Vec::new();
    let mut count = 0;
    for r in reports {
        count += 1;
        worst_increase = worst_increase.max(r.ece_after - r.ece_before);
        if r.ece_after > r.ece_before + 1e-6 {
            failures.push(format!("{} {:.5}->{:.5}", r.layer, r.ece_before, r.ece_after));
        }
    }
    ensure(failures.is_empty(), || {
        format!("argmax kept on {samples} rows; ECE rose on {}/{count}: {}", failures.len(), failures.join(", "))
    })?;
    Ok(format!(
        "argmax kept on {samples} validation rows; ECE never rose over {count} caches (max change {worst_increase:+.2e})"
    ))
}

fn criterion_9(fixtures: &[MlpFixture], toy: &[ThresholdReport]) -> Outcome {
    let mut n = 0;
    for f in fixtures {
        for r in &f.reports {
            check_monotone(r, &format!("seed {} {}", f.seed, r.layer))?;
            n += 1;
        }
    }
    for r in toy {
        check_monotone(r, &format!("toy {}", r.layer))?;
        n += 1;
    }
    Ok(format!("{n} reports non-increasing over 101 thresholds"))
}

// ---------------------------------------------------------------------------
// Toy pipeline

struct ToyRun {
    _dir: tempfile::TempDir,
    cfg: PipelineConfig,
    reports: Vec<ThresholdReport>,
    evaluation: EvaluationReport,
    toy_text: String,
    secs: f64,
}

fn run_stages(cfg: &PipelineConfig) -> Result<(), String> {
    pipeline::search(cfg).map_err(fail)?;
    pipeline::train_caches(cfg, false).map_err(fail)?;
    pipeline::calibrate(cfg).map_err(fail)?;
    pipeline::optimize(cfg).map_err(fail)?;
    Ok(())
}

fn toy_run() -> Result<ToyRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(fail)?;
    let (path, toy_text) = pipeline::toy(dir.path(), ToySizes::default(), 0).map_err(fail)?;
    let cfg = PipelineConfig::load(&path).map_err(fail)?;
    pipeline::candidates(&cfg).map_err(fail)?;
    pipeline::collect(&cfg).map_err(fail)?;
    run_stages(&cfg)?;
    pipeline::evaluate(&cfg).map_err(fail)?;
    let art = cfg.paths.artifacts.clone();
    let evaluation: EvaluationReport =
        serde_json::from_slice(&fs::read(art.join("evaluation/report.json")).map_err(fail)?).map_err(fail)?;
    let mut reports = Vec::new();
    for entry in sorted_files(&art.join("calibration"))? {
        let a: CalibrationArtifact = serde_json::from_slice(&fs::read(entry).map_err(fail)?).map_err(fail)?;
        reports.push(a.report);
    }
    Ok(ToyRun {
        _dir: dir,
        cfg,
        reports,
        evaluation,
        toy_text,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, String> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(fail)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    files.sort();
    Ok(files)
}

fn toy_base_accuracy(text: &str) -> Option<f64> {
    text.split_whitespace().nth(4)?.parse().ok()
}

fn criterion_5(run: &ToyRun) -> Outcome {
    let e = &run.evaluation;
    let pretrained = toy_base_accuracy(&run.toy_text).unwrap_or(e.base_accuracy);
    ensure(pretrained >= 0.85, || format!("backbone reached only {pretrained:.4}"))?;
    ensure(e.cache_enabled_accuracy >= e.base_accuracy - 0.025, || {
        format!("accuracy {:.4} vs base {:.4}", e.cache_enabled_accuracy, e.base_accuracy)
    })?;
    ensure(e.overall_hit_rate > 0.0, || "no cache hits".into())?;
    ensure(run.secs < 900.0, || format!("took {:.0}s", run.secs))?;
    Ok(format!(
        "base {:.4}, cache-enabled {:.4}, hit rate {:.4} on {} test samples, {:.0}s",
        e.base_accuracy, e.cache_enabled_accuracy, e.overall_hit_rate, e.samples, run.secs
    ))
}

fn criterion_6(run: &ToyRun) -> Outcome {
    let f = &run.evaluation.flops;
    ensure(f.reduction >= 0.15, || format!("reduction {:.2}%", f.reduction * 100.0))?;
    Ok(format!(
        "mean FLOPs {:.0} -> {:.0}, reduction {:.2}%",
        f.original_mean,
        f.cache_enabled_mean,
        f.reduction * 100.0
    ))
}

fn criterion_7(model: &CacheEnabledModel, run: &ToyRun) -> Outcome {
    let test = SampleSet::load(run.cfg.paths.test_data.as_ref().unwrap()).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut rows: Vec<usize> = (0..test.len()).collect();
    rows.shuffle(&mut rng);
    rows.truncate(200);
    let samples = test.select(&rows);

    let batched = model.infer_all(&samples, 32).map_err(fail)?;
    for (i, id) in samples.ids.iter().enumerate() {
        let alone = model
            .infer_batch(std::slice::from_ref(id), &samples.inputs.select_rows(&[i]), |_| Ok(()))
            .map_err(fail)?;
        let b = &batched[i];
        ensure(
            b.sample_id == *id
                && alone[0].exit == b.exit
                && alone[0].class == b.class
                && alone[0].confidence.to_bits() == b.confidence.to_bits(),
            || format!("sample {id} differs alone vs batched"),
        )?;
    }
    let early = batched.iter().filter(|r| r.exit != Exit::Final).count();

    let graph = model.graph();
    let plain = graph.to_probabilities(graph.forward(&samples.inputs).map_err(fail)?);
    let off = model.disabled().infer_all(&samples, 32).map_err(fail)?;
    for (i, r) in off.iter().enumerate() {
        let row = plain.row(i);
        ensure(
            r.exit == Exit::Final && r.class == argmax(row) && r.confidence.to_bits() == row[r.class].to_bits(),
            || format!("disabled output differs on {}", r.sample_id),
        )?;
    }
    Ok(format!("200 samples identical alone vs batch 32 ({early} early exits); disabled caches bit-identical"))
}

// ---------------------------------------------------------------------------
// Serving

fn connect(addr: std::net::SocketAddr) -> Result<(TcpStream, BufReader<TcpStream>), String> {
    let s = TcpStream::connect(addr).map_err(fail)?;
    s.set_read_timeout(Some(Duration::from_secs(30))).map_err(fail)?;
    let r = BufReader::new(s.try_clone().map_err(fail)?);
    Ok((s, r))
}

fn next(r: &mut BufReader<TcpStream>) -> Result<Response, String> {
    receive::<Response>(r, 1 << 24).map_err(fail)?.ok_or_else(|| "connection closed".into())
}

fn client(addr: std::net::SocketAddr, conn: usize, inputs: Arc<Tensor>) -> Result<(Vec<String>, usize), String> {
    let (mut w, mut r) = connect(addr)?;
    if conn == 0 {
        write_frame(&mut w, br#"{"type":"infer","batch_id":"bad","samples":[{"id":1}]}"#).map_err(fail)?;
        match next(&mut r)? {
            Response::Error { batch_id, .. } => ensure(batch_id.as_deref() == Some("bad"), || {
                format!("malformed frame answered for {batch_id:?}")
            })?,
            other => return Err(format!("malformed frame answered with {other:?}")),
        }
        write_frame(&mut w, b"\x00garbage").map_err(fail)?;
        ensure(matches!(next(&mut r)?, Response::Error { .. }), || "garbage not rejected".into())?;
    }
    let width = inputs.len() / inputs.batch_size();
    let batch_id = format!("batch-{conn}");
    let samples: Vec<WireSample> = (0..100)
        .map(|i| {
            let row = (conn * 100 + i) % inputs.batch_size();
            WireSample {
                id: format!("c{conn}-s{i}"),
                input: inputs.data()[row * width..(row + 1) * width].to_vec(),
            }
        })
        .collect();
    send(&mut w, &Request::Infer { batch_id: batch_id.clone(), samples }).map_err(fail)?;
    let mut ids = Vec::new();
    let mut seen_final = false;
    let mut early = 0;
    loop {
        match next(&mut r)? {
            Response::Prediction { batch_id: b, sample_id, exit, .. } => {
                ensure(b == batch_id, || format!("prediction for foreign batch {b}"))?;
                if exit == "final" {
                    seen_final = true;
                } else {
                    ensure(!seen_final, || format!("{sample_id} exited at {exit} after a final exit"))?;
                    early += 1;
                }
                ids.push(sample_id);
            }
            Response::BatchDone { batch_id: b, count } => {
                ensure(b == batch_id && count == ids.len(), || format!("batch_done {b} {count} after {}", ids.len()))?;
                break;
            }
            other => return Err(format!("unexpected {other:?}")),
        }
    }
    if conn == 0 {
        send(&mut w, &Request::Report).map_err(fail)?;
        ensure(matches!(next(&mut r)?, Response::Report { .. }), || "no report".into())?;
    }
    Ok((ids, early))
}

fn criterion_10(model: CacheEnabledModel, run: &ToyRun) -> Outcome {
    let start = Instant::now();
    let test = SampleSet::load(run.cfg.paths.test_data.as_ref().unwrap()).map_err(fail)?;
    let server = Server::bind("127.0.0.1:0", Arc::new(model), serde_json::json!({"ok": true}), 1 << 20)
        .map_err(fail)?
        .spawn()
        .map_err(fail)?;
    let addr = server.addr();
    let inputs = Arc::new(test.inputs.clone());
    let handles: Vec<_> = (0..10)
        .map(|c| {
            let inputs = Arc::clone(&inputs);
            thread::spawn(move || client(addr, c, inputs))
        })
        .collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut early = 0;
    for h in handles {
        let (ids, e) = h.join().map_err(|_| "client panicked".to_string())??;
        early += e;
        for id in ids {
            *counts.entry(id).or_default() += 1;
        }
    }
    let expected: HashSet<String> = (0..10).flat_map(|c| (0..100).map(move |i| format!("c{c}-s{i}"))).collect();
    ensure(counts.len() == 1000 && counts.values().all(|&n| n == 1), || {
        format!("{} distinct ids, max count {:?}", counts.len(), counts.values().max())
    })?;
    ensure(counts.keys().all(|k| expected.contains(k)), || "unknown id answered".into())?;

    // oversized frames close the connection after an error
    let (mut w, mut r) = connect(addr)?;
    w.write_all_len(2 << 20)?;
    ensure(matches!(next(&mut r)?, Response::Error { .. }), || "oversized frame not rejected".into())?;
    ensure(read_frame(&mut r, 1 << 20).map_err(fail)?.is_none(), || "connection left open".into())?;

    server.shutdown();
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 ids answered exactly once ({early} early), malformed frames survived, {secs:.1}s"
    ))
}

trait LengthPrefix {
    fn write_all_len(&mut self, len: u32) -> Result<(), String>;
}

impl LengthPrefix for TcpStream {
    fn write_all_len(&mut self, len: u32) -> Result<(), String> {
        use std::io::Write;
        self.write_all(&len.to_be_bytes()).map_err(fail)
    }
}

// ---------------------------------------------------------------------------
// Determinism

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for sub in ["search", "caches", "calibration", "optimize"] {
        for f in sorted_files(&root.join(sub))? {
            let bytes = fs::read(&f).map_err(fail)?;
            out.insert(f, bytes);
        }
    }
    Ok(out)
}

fn criterion_11(run: &ToyRun) -> Outcome {
    let root = &run.cfg.paths.artifacts;
    let before = snapshot(root)?;
    run_stages(&run.cfg)?;
    let after = snapshot(root)?;
    ensure(before.keys().eq(after.keys()), || "artifact set changed".into())?;
    let differing: Vec<String> = before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(v))
        .map(|(k, _)| k.strip_prefix(root).unwrap_or(k).display().to_string())
        .collect();
    ensure(differing.is_empty(), || format!("changed: {}", differing.join(", ")))?;
    Ok(format!("{} artifacts byte-identical after rerun", before.len()))
}

// ---------------------------------------------------------------------------

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    // `cargo test -- --list` and filters are not supported by this target
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: BTreeMap<u32, Outcome> = BTreeMap::new();
    results.insert(1, guarded(criterion_1));

    let start = Instant::now();
    let fixtures: Result<Vec<MlpFixture>, String> = (0..FIXTURE_SEEDS)
        .map(|s| mlp_fixture(1000 + s).map_err(fail))
        .collect();
    let build_secs = start.elapsed().as_secs_f64();

    let (run, toy) = match guarded(toy_run) {
        Ok(run) => (Some(run), None),
        Err(e) => (None, Some(e)),
    };

    let toy_reports: Vec<ThresholdReport> = run.as_ref().map(|r| r.reports.clone()).unwrap_or_default();
    match &fixtures {
        Ok(fx) => {
            results.insert(2, guarded(|| criterion_2(fx, build_secs)));
            results.insert(3, guarded(|| criterion_3(fx)));
            results.insert(4, guarded(|| criterion_4(fx, &toy_reports)));
            results.insert(8, guarded(|| criterion_8(fx, &toy_reports)));
            results.insert(9, guarded(|| criterion_9(fx, &toy_reports)));
        }
        Err(e) => {
            for n in [2, 3, 4, 8, 9] {
                results.insert(n, Err(format!("fixture build failed: {e}")));
            }
        }
    }
    match &run {
        Some(run) => {
            results.insert(5, guarded(|| criterion_5(run)));
            results.insert(6, guarded(|| criterion_6(run)));
            let model = pipeline::load_cache_enabled(&run.cfg).map_err(fail);
            match model {
                Ok(model) => {
                    results.insert(7, guarded(|| criterion_7(&model, run)));
                    results.insert(10, guarded(|| criterion_10(model, run)));
                }
                Err(e) => {
                    results.insert(7, Err(e.clone()));
                    results.insert(10, Err(e));
                }
            }
            results.insert(11, guarded(|| criterion_11(run)));
        }
        None => {
            let e = toy.unwrap_or_else(|| "toy pipeline failed".into());
            for n in [5, 6, 7, 10, 11] {
                results.insert(n, Err(format!("toy pipeline failed: {e}")));
            }
        }
    }

    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n}: PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
