//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one line; the process fails if any gated criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lmrerank::arcface::{adaptive_margins, arcface_loss_and_grad, ArcFaceParams, CenterWeights, ClassMargins};
use lmrerank::harness::{cmd_distractors, cmd_gen};
use lmrerank::metrics::{gap, GroundTruth, Prediction, PredictionList};
use lmrerank::rerank::{
    build_distractor_map, read_distractor_map, ClassificationModel, LogitMode, Pipeline, PipelineConfig, ScoreTable,
};
use lmrerank::store::{decode_embeddings, encode_embeddings, ClassCenterSet, EmbeddingSet, LabelTable, Manifest};
use lmrerank::synth::SyntheticSpec;
use lmrerank::vector::{ensemble_concat_slices, gem_pool, top_k_with, FeatureMap, GemParams, TopKOptions};
use lmrerank::{Error, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

// 1 -------------------------------------------------------------------------

fn ensemble_identity() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0f64;
    let mut trials = 0;
    for m in [2usize, 3, 5] {
        for _ in 0..100 {
            let dims: Vec<usize> = (0..m).map(|_| r.gen_range(1..=48)).collect();
            let a: Vec<Vec<f64>> = dims.iter().map(|&d| normal(&mut r, d)).collect();
            let b: Vec<Vec<f64>> = dims.iter().map(|&d| normal(&mut r, d)).collect();
            let mean = a.iter().zip(&b).map(|(x, y)| dot(&unit(x), &unit(y))).sum::<f64>() / m as f64;
            let af: Vec<Vec<f32>> = a.iter().map(|v| narrow(v)).collect();
            let bf: Vec<Vec<f32>> = b.iter().map(|v| narrow(v)).collect();
            let ea = ensemble_concat_slices(&af.iter().map(|v| v.as_slice()).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
            let eb = ensemble_concat_slices(&bf.iter().map(|v| v.as_slice()).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
            let cos = dot(&widen(&ea), &widen(&eb));
            worst = worst.max((cos - mean).abs());
            trials += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-6, || format!("max |Δ| {worst:.3e} > 1e-6"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{trials} trials over M in {{2,3,5}}, max |Δ| {worst:.2e}, {elapsed:.2?}"))
}

// 2 -------------------------------------------------------------------------

fn top_k_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut ties = 0usize;
    for instance in 0..100 {
        let dim = r.gen_range(1..=16);
        let n = r.gen_range(1..=200);
        // A narrow integer grid forces many exact score ties; all dot products
        // of small integers are exact in every summation order.
        let grid: i32 = if instance % 2 == 0 { 2 } else { 1000 };
        let cell = |r: &mut ChaCha8Rng| r.gen_range(-grid..=grid) as f32;
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + r.gen_range(0..3)).collect();
        ids.sort_unstable();
        let data: Vec<f32> = (0..n * dim).map(|_| cell(&mut r)).collect();
        let index = EmbeddingSet::new(dim, ids.clone(), data.clone()).map_err(|e| e.to_string())?;
        let query: Vec<f32> = (0..dim).map(|_| cell(&mut r)).collect();
        let k = r.gen_range(1..=n + 3);

        let mut all: Vec<(f64, u64)> = (0..n)
            .map(|i| (dot(&widen(&query), &widen(&data[i * dim..(i + 1) * dim])), ids[i]))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        ties += all.windows(2).filter(|w| w[0].0 == w[1].0).count();
        all.truncate(k);

        let opts = TopKOptions {
            chunk_rows: r.gen_range(1..=64),
            exec: if instance % 3 == 0 { Execution::Sequential } else { Execution::default() },
        };
        let got = top_k_with(&query, &index, k, opts).map_err(|e| e.to_string())?;
        let got: Vec<(f64, u64)> = got.iter().map(|c| (c.score, c.image_id)).collect();
        ensure(got == all, || format!("instance {instance}: {got:?} != {all:?}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("100 instances exact, {ties} tied neighbours exercised, {elapsed:.2?}"))
}

// 3 -------------------------------------------------------------------------

fn loss_of(
    emb: &[Vec<f64>],
    labels: &[u32],
    centers: &CenterWeights,
    margins: &ClassMargins,
    params: &ArcFaceParams,
) -> f64 {
    arcface_loss_and_grad(emb, labels, centers, margins, params).unwrap().loss
}

/// Plain softmax cross-entropy on scaled cosines.
fn plain_cross_entropy(emb: &[Vec<f64>], labels: &[u32], centers: &CenterWeights, s: f64) -> f64 {
    let mut total = 0.0;
    for (e, &y) in emb.iter().zip(labels) {
        let u = unit(e);
        let z: Vec<f64> = centers.rows.iter().map(|c| s * dot(&u, &unit(c))).collect();
        let zy = z[centers.ids.iter().position(|&l| l == y).unwrap()];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - zy;
    }
    total / emb.len() as f64
}

fn arcface_gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let h = 1e-4;
    let params = ArcFaceParams::default();
    let mut worst_rel = 0f64;
    let mut worst_abs = 0f64;
    let mut worst_ce = 0f64;
    let mut coords = 0usize;
    let mut config = 0;
    while config < 20 {
        let batch = r.gen_range(1..=6);
        let n_classes = r.gen_range(2..=6u32);
        let dim = r.gen_range(2..=16);
        let ids: Vec<u32> = (0..n_classes).collect();
        let counts: BTreeMap<u32, u64> = ids.iter().map(|&l| (l, r.gen_range(1..=500))).collect();
        let margins = adaptive_margins(&counts, &params).map_err(|e| e.to_string())?;
        let centers = CenterWeights {
            ids: ids.clone(),
            rows: (0..n_classes).map(|_| normal(&mut r, dim)).collect(),
        };
        let labels: Vec<u32> = (0..batch).map(|_| r.gen_range(0..n_classes)).collect();
        let emb: Vec<Vec<f64>> = (0..batch).map(|_| normal(&mut r, dim)).collect();

        // The target logit has a kink at θ = π − m and the angle's derivative
        // is singular at θ = 0; finite differences are meaningless there.
        let near_kink = emb.iter().zip(&labels).any(|(e, &y)| {
            let theta = dot(&unit(e), &unit(&centers.rows[y as usize])).clamp(-1.0, 1.0).acos();
            let m = margins.get(y).unwrap();
            (theta - (std::f64::consts::PI - m)).abs() < 1e-2 || theta < 1e-2
        });
        if near_kink {
            continue;
        }
        config += 1;

        let got = arcface_loss_and_grad(&emb, &labels, &centers, &margins, &params).map_err(|e| e.to_string())?;
        let mut compare = |analytic: f64, numeric: f64| {
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
            worst_rel = worst_rel.max(rel);
            worst_abs = worst_abs.max(abs);
            coords += 1;
        };
        for i in 0..batch {
            for d in 0..dim {
                let mut plus = emb.clone();
                let mut minus = emb.clone();
                plus[i][d] += h;
                minus[i][d] -= h;
                let fd = (loss_of(&plus, &labels, &centers, &margins, &params)
                    - loss_of(&minus, &labels, &centers, &margins, &params))
                    / (2.0 * h);
                compare(got.grad_embeddings[i][d], fd);
            }
        }
        for c in 0..n_classes as usize {
            for d in 0..dim {
                let mut plus = centers.clone();
                let mut minus = centers.clone();
                plus.rows[c][d] += h;
                minus.rows[c][d] -= h;
                let fd = (loss_of(&emb, &labels, &plus, &margins, &params)
                    - loss_of(&emb, &labels, &minus, &margins, &params))
                    / (2.0 * h);
                compare(got.grad_centers[c][d], fd);
            }
        }

        let zero = ClassMargins::uniform(ids.clone(), 0.0);
        let reduced = loss_of(&emb, &labels, &centers, &zero, &params);
        worst_ce = worst_ce.max((reduced - plain_cross_entropy(&emb, &labels, &centers, params.scale)).abs());
    }
    let elapsed = start.elapsed();
    ensure(worst_rel <= 1e-4, || format!("max relative error {worst_rel:.3e} > 1e-4 (max abs {worst_abs:.3e})"))?;
    ensure(worst_ce <= 1e-10, || format!("zero-margin loss differs from cross-entropy by {worst_ce:.3e}"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "20 configs, {coords} coordinates, max rel {worst_rel:.2e}, max abs {worst_abs:.2e}, zero-margin |Δ| {worst_ce:.1e}, {elapsed:.2?}"
    ))
}

// 4 -------------------------------------------------------------------------

fn gem_bounds() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let mut checks = 0usize;
    for map in 0..100 {
        let locations = r.gen_range(1..=64);
        let channels = r.gen_range(1..=16);
        let sparse = map % 4 == 0;
        let values: Vec<f32> = (0..locations * channels)
            .map(|_| if sparse && r.gen_bool(0.7) { 0.0 } else { r.gen_range(0.0..10.0f32) })
            .collect();
        let f = FeatureMap::new(locations, channels, values.clone()).map_err(|e| e.to_string())?;
        let values = &values;
        let column = |c: usize| (0..locations).map(move |i| values[i * channels + c] as f64);

        let mean = gem_pool(&f, GemParams::new(1.0).unwrap()).map_err(|e| e.to_string())?;
        for c in 0..channels {
            let expected = (column(c).sum::<f64>() / locations as f64) as f32;
            ensure(mean.as_slice()[c] == expected, || format!("map {map} channel {c}: p=1 gives {} not {expected}", mean.as_slice()[c]))?;
        }
        for p in [1.0, 3.0, 16.0, 64.0] {
            let g = gem_pool(&f, GemParams::new(p).unwrap()).map_err(|e| e.to_string())?;
            for c in 0..channels {
                let max = column(c).fold(0.0, f64::max);
                let lower = (max * (locations as f64).powf(-1.0 / p)) as f32;
                let v = g.as_slice()[c];
                // Bounds are compared after rounding to f32, the output precision.
                ensure(lower <= v && v <= max as f32, || format!("map {map} channel {c} p={p}: {lower} <= {v} <= {max} fails"))?;
                checks += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("100 maps, {checks} bound checks, p=1 equals mean exactly, {elapsed:.2?}"))
}

// 5 -------------------------------------------------------------------------

/// Materializes the full ranked precision/recall table and reads GAP off it.
fn gap_oracle(rows: &[(u64, Option<u32>, f64)], truth: &BTreeMap<u64, Option<u32>>) -> f64 {
    let m = truth.values().filter(|t| t.is_some()).count();
    let mut ranked: Vec<&(u64, Option<u32>, f64)> = rows.iter().filter(|r| r.1.is_some()).collect();
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    struct Row {
        relevant: bool,
        precision: f64,
        #[allow(dead_code)]
        recall: f64,
    }
    let mut table = Vec::new();
    for i in 0..ranked.len() {
        let hits = ranked[..=i].iter().filter(|p| truth[&p.0] == p.1).count();
        table.push(Row {
            relevant: truth[&ranked[i].0] == ranked[i].1,
            precision: hits as f64 / (i + 1) as f64,
            recall: if m == 0 { 0.0 } else { hits as f64 / m as f64 },
        });
    }
    if m == 0 {
        return 0.0;
    }
    table.iter().filter(|r| r.relevant).map(|r| r.precision).sum::<f64>() / m as f64
}

fn prediction_list(rows: &[(u64, Option<u32>, f64)]) -> PredictionList {
    PredictionList::new(
        rows.iter()
            .map(|&(query_id, landmark, confidence)| Prediction {
                query_id,
                landmark,
                confidence,
            })
            .collect(),
    )
    .unwrap()
}

fn gap_cases() -> Outcome {
    let truth: GroundTruth = GroundTruth::parse("1\t10\n2\t20\n").map_err(|e| e.to_string())?;
    let cases = [
        (vec![(1, Some(10), 0.4), (2, Some(20), 0.8)], 1.0),
        (vec![(1, Some(11), 0.95), (2, Some(20), 0.9)], 0.25),
        (vec![(1, Some(11), 0.5), (2, Some(20), 0.9)], 0.5),
    ];
    for (rows, expected) in &cases {
        let g = gap(&prediction_list(rows), &truth).map_err(|e| e.to_string())?;
        ensure(g == *expected, || format!("hand case gives {g}, expected {expected}"))?;
    }

    let mut r = rng(5);
    let mut worst = 0f64;
    for instance in 0..50 {
        let n = r.gen_range(1..=30u64);
        let truth: BTreeMap<u64, Option<u32>> =
            (1..=n).map(|q| (q, if r.gen_bool(0.7) { Some(r.gen_range(0..5)) } else { None })).collect();
        let mut rows = Vec::new();
        for (&q, &t) in &truth {
            if r.gen_bool(0.15) {
                continue;
            }
            let landmark = if r.gen_bool(0.1) {
                None
            } else if t.is_some() && r.gen_bool(0.5) {
                t
            } else {
                Some(r.gen_range(0..5))
            };
            // Coarse confidences so ties occur.
            let confidence = if landmark.is_some() { r.gen_range(0..8) as f64 / 4.0 - 0.5 } else { 0.0 };
            rows.push((q, landmark, confidence));
        }
        let mut gt = GroundTruth::new();
        for (&q, &t) in &truth {
            gt.insert(q, t).unwrap();
        }
        let got = gap(&prediction_list(&rows), &gt).map_err(|e| e.to_string())?;
        let expected = gap_oracle(&rows, &truth);
        worst = worst.max((got - expected).abs());
        ensure((got - expected).abs() <= 1e-12, || format!("instance {instance}: {got} vs oracle {expected}"))?;
    }
    Ok(format!("hand cases 1.0 / 0.25 / 0.5 exact, 50 oracle instances max |Δ| {worst:.1e}"))
}

// 6 -------------------------------------------------------------------------

/// Minimal independent reader for the embedding container.
fn read_emb(path: &Path) -> BTreeMap<u64, Vec<f64>> {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[0..4], b"EMB1");
    let dim = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(b[10..18].try_into().unwrap()) as usize;
    let rec = 8 + 4 * dim;
    (0..count)
        .map(|i| {
            let r = &b[18 + i * rec..18 + (i + 1) * rec];
            let id = u64::from_le_bytes(r[0..8].try_into().unwrap());
            let v = r[8..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            (id, v)
        })
        .collect()
}

fn read_pairs(path: &Path) -> BTreeMap<u64, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap();
            (a.parse().unwrap(), b.to_string())
        })
        .collect()
}

struct Persisted {
    models: Vec<String>,
    files: BTreeMap<String, PathBuf>,
}

impl Persisted {
    fn open(manifest: &Path) -> Self {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        let base = manifest.parent().unwrap();
        Self {
            models: v["model_names"].as_array().unwrap().iter().map(|m| m.as_str().unwrap().to_string()).collect(),
            files: v["roles"]
                .as_object()
                .unwrap()
                .iter()
                .map(|(k, p)| (k.clone(), base.join(p.as_str().unwrap())))
                .collect(),
        }
    }

    fn per_model(&self, role: &str) -> Vec<BTreeMap<u64, Vec<f64>>> {
        self.models.iter().map(|m| read_emb(&self.files[&format!("{role}:{m}")])).collect()
    }

    fn ensembled(&self, role: &str) -> BTreeMap<u64, Vec<f64>> {
        let per = self.per_model(role);
        per[0]
            .keys()
            .map(|id| {
                let cat: Vec<f64> = per.iter().flat_map(|m| unit(&m[id])).collect();
                (*id, unit(&cat))
            })
            .collect()
    }
}

fn decomposition() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    cmd_gen(&SyntheticSpec::default(), dir.path()).map_err(|e| e.to_string())?;
    let manifest_path = dir.path().join("manifest.json");
    let dist_path = dir.path().join("distractors.tsv");
    let config = PipelineConfig::default();
    cmd_distractors(&manifest_path, &config, &dist_path).map_err(|e| e.to_string())?;

    let manifest = Manifest::load(&manifest_path).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::load(&manifest, Execution::default()).map_err(|e| e.to_string())?;
    let dmap = read_distractor_map(&dist_path).map_err(|e| e.to_string())?;
    let results = pipeline.predict_detailed(Some(&dmap), &config).map_err(|e| e.to_string())?;

    let files = Persisted::open(&manifest_path);
    let index = files.ensembled("index");
    let queries = files.ensembled("query");
    let distractors = files.ensembled("distractor");
    let per_model_queries = files.per_model("query");
    let centers: Vec<BTreeMap<u64, Vec<f64>>> = files
        .per_model("centers")
        .into_iter()
        .map(|m| m.into_iter().map(|(l, v)| (l, unit(&v))).collect())
        .collect();
    let labels: BTreeMap<u64, u32> =
        read_pairs(&files.files["labels"]).into_iter().map(|(k, v)| (k, v.parse().unwrap())).collect();
    let table: BTreeMap<u64, f64> =
        read_pairs(&dist_path).into_iter().map(|(k, v)| (k, v.parse().unwrap())).collect();

    // The persisted distractor table itself, from scratch.
    let mut worst_table = 0f64;
    for (id, v) in &index {
        let mut sims: Vec<f64> = distractors.values().map(|d| dot(v, d)).collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let n = config.distractor_top_n.min(sims.len());
        let expected = sims[..n].iter().sum::<f64>() / n as f64;
        worst_table = worst_table.max((table[id] - expected).abs());
    }
    ensure(worst_table <= 1e-6, || format!("distractor table off by {worst_table:.3e}"))?;

    let mut worst = 0f64;
    let mut checked = 0usize;
    for r in &results {
        let qid = r.candidates.query_id;
        let q = &queries[&qid];
        let mut ranked: Vec<(f64, u64)> = index.iter().map(|(id, v)| (dot(q, v), *id)).collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let k = config.k;
        if ranked[k - 1].0 - ranked[k].0 > 1e-5 {
            let mut want: Vec<u64> = ranked[..k].iter().map(|x| x.1).collect();
            let mut got: Vec<u64> = r.candidates.entries.iter().map(|c| c.image_id).collect();
            want.sort_unstable();
            got.sort_unstable();
            ensure(want == got, || format!("query {qid}: retrieved {got:?}, oracle {want:?}"))?;
        }
        for c in &r.candidates.entries {
            let raw = dot(q, &index[&c.image_id]);
            let label = labels[&c.image_id];
            let logit = per_model_queries
                .iter()
                .zip(&centers)
                .map(|(qs, cs)| dot(&unit(&qs[&qid]), &cs[&(label as u64)]))
                .sum::<f64>()
                / centers.len() as f64;
            let dist = table[&c.image_id];
            let expected = raw + logit - dist;
            for (what, a, b) in [
                ("adjusted", c.adjusted_score, expected),
                ("raw", c.raw_score, raw),
                ("logit", c.logit_term, logit),
                ("distractor", c.distractor_term, dist),
                ("identity", c.adjusted_score, c.raw_score + c.logit_term - c.distractor_term),
            ] {
                let d = (a - b).abs();
                worst = worst.max(d);
                ensure(d <= 1e-6, || format!("query {qid} image {}: {what} {a} vs {b}", c.image_id))?;
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} candidates over {} queries, max |Δ| {worst:.2e}; distractor table max |Δ| {worst_table:.2e}",
        results.len()
    ))
}

// 7 -------------------------------------------------------------------------

fn pipeline_benefit() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let manifest = cmd_gen(&spec, dir.path()).map_err(|e| e.to_string())?;
    let truth = GroundTruth::load(&dir.path().join("truth.tsv")).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::load(&manifest, Execution::default()).map_err(|e| e.to_string())?;
    let dmap = build_distractor_map(
        pipeline.index(),
        &lmrerank::rerank::load_ensembled(&manifest, "distractor", Execution::default()).map_err(|e| e.to_string())?,
        3,
        Execution::default(),
    )
    .map_err(|e| e.to_string())?;

    let full = PipelineConfig::default();
    let variants = [
        ("full", full.clone()),
        ("none", PipelineConfig::retrieval_only(full.k)),
        ("no-distractor", PipelineConfig { distractor_penalty: false, ..full.clone() }),
        ("no-logit", PipelineConfig { logit_adjust: false, ..full.clone() }),
        ("no-top1", PipelineConfig { inject_top1: false, ..full.clone() }),
        ("index-logit", PipelineConfig { logit_mode: LogitMode::IndexLogit, ..full.clone() }),
    ];
    let mut scores = BTreeMap::new();
    let mut line = Vec::new();
    for (name, config) in &variants {
        let preds = pipeline.predict_all(Some(&dmap), config).map_err(|e| e.to_string())?;
        let g = gap(&preds, &truth).map_err(|e| e.to_string())?;
        scores.insert(*name, g);
        line.push(format!("{name} {g:.4}"));
    }
    let elapsed = start.elapsed();
    let summary = format!("seed {}, n_junk_index {}: {}, {elapsed:.2?}", spec.seed, spec.n_junk_index, line.join(", "));
    ensure(spec.n_junk_index >= 20, || "fixture has fewer than 20 junk index images".into())?;
    ensure(scores["full"] > scores["none"], || format!("full does not beat none; {summary}"))?;
    ensure(scores["no-distractor"] < scores["full"], || format!("distractor stage does not help; {summary}"))?;
    within(elapsed, Duration::from_secs(30))?;
    Ok(summary)
}

// 8 -------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lmrerank")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    Ok(out.stdout)
}

fn run_flow(root: &Path, threads: &str) -> Result<Vec<u8>, String> {
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let data = s(root.join("data"));
    let manifest = s(root.join("data/manifest.json"));
    let dist = s(root.join("distractors.tsv"));
    let preds = s(root.join("predictions.tsv"));
    cli(&["gen", "--out", &data, "--seed", "42"])?;
    cli(&["distractors", "--manifest", &manifest, "--out", &dist, "--threads", threads])?;
    cli(&["predict", "--manifest", &manifest, "--distractors", &dist, "--out", &preds, "--threads", threads])?;
    cli(&["eval", "--predictions", &preds, "--truth", &s(root.join("data/truth.tsv"))])
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let a = TempDir::new().map_err(|e| e.to_string())?;
    let b = TempDir::new().map_err(|e| e.to_string())?;
    let report_a = run_flow(a.path(), "1")?;
    let report_b = run_flow(b.path(), "8")?;
    ensure(report_a == report_b, || "eval reports differ".into())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "file sets differ".into())?;
    for (name, bytes) in &ta {
        ensure(&tb[name] == bytes, || format!("{} differs", name.display()))?;
    }
    let report = String::from_utf8_lossy(&report_a).replace('\n', "; ");
    Ok(format!("{} files identical across runs and 1 vs 8 threads ({report})", ta.len()))
}

// 9 -------------------------------------------------------------------------

fn random_set(r: &mut ChaCha8Rng) -> EmbeddingSet {
    let dim = r.gen_range(1..=64);
    let n = r.gen_range(0..=100);
    let mut ids: Vec<u64> = (0..n).map(|_| r.gen()).collect();
    ids.sort_unstable();
    ids.dedup();
    let data = (0..ids.len() * dim)
        .map(|_| loop {
            // Arbitrary finite bit patterns, including subnormals and -0.0.
            let x = f32::from_bits(r.gen());
            if x.is_finite() {
                break x;
            }
        })
        .collect();
    EmbeddingSet::new(dim, ids, data).unwrap()
}

fn same_bits(a: &EmbeddingSet, b: &EmbeddingSet) -> bool {
    a.dim() == b.dim()
        && a.ids() == b.ids()
        && (0..a.len()).all(|i| a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::BadMagic(_) => "BadMagic",
        Error::BadVersion(_) => "BadVersion",
        Error::Truncated { .. } => "Truncated",
        Error::NonFinite(_) => "NonFinite",
        Error::InvariantViolation(_) => "InvariantViolation",
        Error::Parse { .. } => "Parse",
        Error::DuplicateId(_) => "DuplicateId",
        Error::Io { .. } => "Io",
        _ => "other",
    }
}

fn format_round_trip() -> Outcome {
    let mut r = rng(9);
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    for i in 0..20 {
        let set = random_set(&mut r);
        let path = dir.path().join(format!("set{i}.emb"));
        lmrerank::store::write_embeddings(&set, &path).map_err(|e| e.to_string())?;
        let back = lmrerank::store::read_embeddings(&path).map_err(|e| e.to_string())?;
        ensure(same_bits(&set, &back), || format!("set {i} changed on round trip"))?;
        ensure(fs::read(&path).unwrap().len() == 18 + set.len() * (8 + 4 * set.dim()), || "unexpected file size".into())?;

        let ids: Vec<u64> = set.ids().to_vec();
        let labels: LabelTable = ids.iter().map(|&id| (id, r.gen_range(0..1000))).collect();
        let text = labels.to_tsv();
        ensure(LabelTable::parse(&text).unwrap() == labels && LabelTable::parse(&text).unwrap().to_tsv() == text, || {
            format!("labels {i} changed on round trip")
        })?;

        let mut truth = GroundTruth::new();
        for &id in &ids {
            truth.insert(id, r.gen_bool(0.6).then(|| r.gen_range(0..1000))).unwrap();
        }
        let text = truth.to_tsv();
        ensure(GroundTruth::parse(&text).unwrap() == truth && GroundTruth::parse(&text).unwrap().to_tsv() == text, || {
            format!("truth {i} changed on round trip")
        })?;

        let scores: String = ids.iter().map(|id| format!("{id}\t{:.6}\n", r.gen_range(-1.0..=1.0f64))).collect();
        let table = ScoreTable::parse(&scores).map_err(|e| e.to_string())?;
        ensure(table.to_tsv() == scores && ScoreTable::parse(&table.to_tsv()).unwrap() == table, || {
            format!("distractor table {i} changed on round trip")
        })?;

        let preds: String = ids
            .iter()
            .map(|id| {
                if r.gen_bool(0.2) {
                    format!("{id}\t\t\n")
                } else {
                    format!("{id}\t{}\t{:.6}\n", r.gen_range(0..1000), r.gen_range(-3.0..3.0f64))
                }
            })
            .collect();
        let list = PredictionList::parse(&preds).map_err(|e| e.to_string())?;
        ensure(list.to_tsv() == preds && PredictionList::parse(&list.to_tsv()).unwrap() == list, || {
            format!("predictions {i} changed on round trip")
        })?;
    }

    let good = encode_embeddings(&EmbeddingSet::new(2, vec![1, 2], vec![0.5, 1.0, -1.0, 2.0]).unwrap());
    let mut bad_magic = good.clone();
    bad_magic[0..4].copy_from_slice(b"XXXX");
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    let mut nan = good.clone();
    nan[18 + 8..18 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
    let mut inf = good.clone();
    inf[18 + 12..18 + 16].copy_from_slice(&f32::INFINITY.to_le_bytes());
    let mut unsorted = good.clone();
    unsorted[18..26].copy_from_slice(&9u64.to_le_bytes());
    let mut trailing = good.clone();
    trailing.push(0);
    let mut zero_dim = good.clone();
    zero_dim[6..10].copy_from_slice(&0u32.to_le_bytes());
    let mut huge_count = good.clone();
    huge_count[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
    let emb_cases: Vec<(&str, Vec<u8>, &str)> = vec![
        ("bad magic", bad_magic, "BadMagic"),
        ("bad version", bad_version, "BadVersion"),
        ("short header", good[..10].to_vec(), "Truncated"),
        ("short payload", good[..good.len() - 3].to_vec(), "Truncated"),
        ("count overflow", huge_count, "Truncated"),
        ("NaN entry", nan, "NonFinite"),
        ("infinite entry", inf, "NonFinite"),
        ("unsorted ids", unsorted, "InvariantViolation"),
        ("trailing bytes", trailing, "InvariantViolation"),
        ("zero dim", zero_dim, "InvariantViolation"),
    ];
    let mut classes = 0;
    for (what, bytes, want) in &emb_cases {
        let path = dir.path().join("corrupt.emb");
        fs::write(&path, bytes).unwrap();
        let e = lmrerank::store::read_embeddings(&path).err();
        let got = e.as_ref().map(kind).unwrap_or("accepted");
        ensure(got == *want, || format!("{what}: got {got}, expected {want}"))?;
        ensure(decode_embeddings(bytes).is_err(), || format!("{what}: decoded"))?;
        classes += 1;
    }
    let tsv_cases: Vec<(&str, Result<(), Error>, &str)> = vec![
        ("labels duplicate", LabelTable::parse("10\t3\n10\t4\n").map(drop), "DuplicateId"),
        ("labels non-numeric", LabelTable::parse("10\tx\n").map(drop), "Parse"),
        ("labels extra column", LabelTable::parse("10\t3\t1\n").map(drop), "Parse"),
        ("truth duplicate", GroundTruth::parse("1\t2\n1\t\n").map(drop), "DuplicateId"),
        ("distractor out of range", ScoreTable::parse("1\t1.5\n").map(drop), "Parse"),
        ("distractor duplicate", ScoreTable::parse("1\t0.5\n1\t0.2\n").map(drop), "DuplicateId"),
        ("prediction non-numeric confidence", PredictionList::parse("1\t2\tabc\n").map(drop), "Parse"),
        ("prediction duplicate query", PredictionList::parse("1\t2\t0.5\n1\t3\t0.5\n").map(drop), "DuplicateId"),
        ("prediction NaN", PredictionList::parse("1\t2\tNaN\n").map(drop), "NonFinite"),
    ];
    for (what, res, want) in tsv_cases {
        let got = res.as_ref().err().map(kind).unwrap_or("ok");
        ensure(got == want, || format!("{what}: got {got}, expected {want}"))?;
        classes += 1;
    }
    let missing = lmrerank::store::read_labels(Path::new("/nonexistent/labels.tsv")).err();
    ensure(missing.as_ref().map(kind) == Some("Io"), || "missing label file is not an I/O error".into())?;
    Ok(format!("20 sets x 5 formats bit-exact; {classes} malformed-input classes map to their errors"))
}

// 10 ------------------------------------------------------------------------

fn throughput() -> Outcome {
    let (n_index, n_queries, dim, n_landmarks) = (100_000usize, 1_000usize, 512usize, 1_000u32);
    let mut r = rng(10);
    let rows = |n: usize, base: u64, r: &mut ChaCha8Rng| {
        let data: Vec<f32> = (0..n * dim).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
        EmbeddingSet::new(dim, (0..n as u64).map(|i| base + i).collect(), data).unwrap()
    };
    let setup = Instant::now();
    let index = rows(n_index, 1, &mut r);
    let queries = rows(n_queries, 1_000_000, &mut r);
    let centers = rows(n_landmarks as usize, 0, &mut r);
    let distractors = rows(50, 2_000_000, &mut r);
    let labels: LabelTable = index.ids().iter().map(|&id| (id, r.gen_range(0..n_landmarks))).collect();
    let model = ClassificationModel {
        centers: ClassCenterSet::new("m0", &centers).unwrap(),
        queries: queries.clone(),
        index: index.clone(),
    };
    let pipeline = Pipeline::from_parts(&[index], &[queries], labels, vec![model], Execution::default()).map_err(|e| e.to_string())?;
    let dmap = build_distractor_map(pipeline.index(), &distractors, 3, Execution::default()).map_err(|e| e.to_string())?;
    let setup = setup.elapsed();

    let start = Instant::now();
    let preds = pipeline.predict_all(Some(&dmap), &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let detail = format!(
        "{} queries x {n_index} x {dim} predicted in {elapsed:.2?} on {cores} core(s) (setup {setup:.2?}, target < 60 s)",
        preds.len()
    );
    if elapsed < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
    gated: bool,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "ensemble identity", run: ensemble_identity, gated: true },
        Criterion { id: 2, name: "top_k oracle", run: top_k_oracle, gated: true },
        Criterion { id: 3, name: "arcface gradients", run: arcface_gradients, gated: true },
        Criterion { id: 4, name: "gem bounds and limits", run: gem_bounds, gated: true },
        Criterion { id: 5, name: "gap hand cases and oracle", run: gap_cases, gated: true },
        Criterion { id: 6, name: "score decomposition", run: decomposition, gated: true },
        Criterion { id: 7, name: "pipeline benefit", run: pipeline_benefit, gated: true },
        Criterion { id: 8, name: "determinism", run: determinism, gated: true },
        Criterion { id: 9, name: "format round-trip", run: format_round_trip, gated: true },
        Criterion { id: 10, name: "throughput smoke check", run: throughput, gated: false },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match (&outcome, c.gated) {
            (Ok(d), _) => ("PASS", d),
            (Err(d), true) => {
                failed += 1;
                ("FAIL", d)
            }
            (Err(d), false) => ("INFO", d),
        };
        println!("{tag} {:>2} {}: {detail}", c.id, c.name);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
