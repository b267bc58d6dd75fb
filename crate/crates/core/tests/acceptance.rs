//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitelasso::config::RunConfig;
use sitelasso::cv::{ensemble_weights, make_splits, tally_selection, Ensemble};
use sitelasso::features::*;
use sitelasso::geo::synth::{CovariateSource, CovariateSpec, SiteSpec, TruthSpec};
use sitelasso::geo::{generate_synthetic, predict_raster, term_covariates, SyntheticSpec};
use sitelasso::lasso::fit_lasso_path;
use sitelasso::methods::{run_methods, Method, MethodSettings};
use sitelasso::pipeline::{execute_run, write_synthetic};
use sitelasso::standardize::{apply_transform, fit_transform, inverse_transform};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn quota(sites: &[&str], q: usize) -> BTreeMap<String, usize> {
    sites.iter().map(|s| (s.to_string(), q)).collect()
}

fn c1_lasso_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut gap, mut kkt) = (0.0_f64, 0.0_f64);
    for i in 0..200 {
        let n = rng.random_range(4..=30);
        let p = rng.random_range(1..=50);
        let (x, y) = common::random_problem(10_000 + i, n, p);
        let path = fit_lasso_path(&x, &y).map_err(|e| format!("instance {i} ({n}x{p}): {e}"))?;
        let g = common::max_oracle_gap(&x, &y, &path);
        let k = common::max_kkt_violation(&x, &y, &path);
        ensure!(g <= 1e-6, "instance {i} ({n}x{p}): oracle gap {g:e}");
        ensure!(k <= 1e-8, "instance {i} ({n}x{p}): KKT residual {k:e}");
        gap = gap.max(g);
        kkt = kkt.max(k);
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!("200 instances, worst gap {gap:.1e}, worst KKT {kkt:.1e}, {:.1}s", t.as_secs_f64()))
}

fn c2_count_law() -> Outcome {
    let mut seen = Vec::new();
    for p in [1usize, 5, 65] {
        let data = common::toy_dataset(p as u64, &[("S", 20)], p, |_, _, _| 0.0);
        let d = expand_terms(&data, 4).map_err(|e| e.to_string())?;
        let want = 4 * p + p * (p - 1) / 2;
        ensure!(d.n_cols() == want, "p = {p}: {} columns, expected {want}", d.n_cols());
        seen.push(format!("{p}->{}", d.n_cols()));
    }
    Ok(seen.join(", "))
}

fn c3_block_structure() -> Outcome {
    let data = common::toy_dataset(3, &[("B1", 60), ("B2", 56)], 4, |_, _, _| 0.0);
    let g = expand_terms(&data, 4).map_err(|e| e.to_string())?;
    let w = g.n_cols();
    let b = assemble_site_blocks(&g, BlockMode::GlobalAndSite).map_err(|e| e.to_string())?;
    ensure!(b.n_cols() == 3 * w, "width {} for w = {w}", b.n_cols());
    let sites = b.row_sites().to_vec();
    let foreign = |i: usize, id: &str| match TermSpec::parse(id).unwrap().scope {
        Scope::Site(s) => s != sites[i],
        Scope::Global => false,
    };
    let mut zeros = 0;
    for i in 0..b.n_rows() {
        for (j, t) in b.terms().iter().enumerate() {
            if foreign(i, &t.id()) {
                ensure!(b.values()[[i, j]].to_bits() == 0, "raw ({i}, {}) is not +0", t.id());
                zeros += 1;
            }
        }
    }
    let (x, t) = fit_transform(&b).map_err(|e| e.to_string())?;
    let holdout: Vec<usize> = (0..b.n_rows()).step_by(3).collect();
    let v = apply_transform(&b.select_rows(&holdout), &t).map_err(|e| e.to_string())?;
    for (k, id) in x.column_ids().iter().enumerate() {
        for i in 0..x.n_rows() {
            if foreign(i, id) {
                ensure!(x.values()[[i, k]].to_bits() == 0, "standardized ({i}, {id}) is not +0");
            }
        }
        for (r, &i) in holdout.iter().enumerate() {
            if foreign(i, id) {
                ensure!(v.values()[[r, k]].to_bits() == 0, "replayed ({i}, {id}) is not +0");
            }
        }
    }
    Ok(format!("w = {w}, width {}, {zeros} structural zeros exact after standardization", b.n_cols()))
}

fn c4_filter() -> Outcome {
    let mut worst = 0.0_f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(3..7);
        let n = rng.random_range(20..40);
        let f = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let mix: Vec<[f64; 3]> = (0..p)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.3)])
            .collect();
        let covs = Array2::from_shape_fn((n, p), |(i, j)| {
            mix[j][0] * f[[i, 0]] + mix[j][1] * f[[i, 1]] + mix[j][2] * rng.random_range(-1.0..1.0) + 0.5
        });
        let names: Vec<String> = (0..p).map(|j| format!("v{j}")).collect();
        let meta: Vec<CovariateMeta> = names.iter().map(|c| CovariateMeta::new(c.clone(), rng.random_range(1..=10))).collect();
        let d = build_design(&expansion_terms(&names, 4), &names, &covs, &vec!["S".to_string(); n]).unwrap();
        let (kept, _) = filter_collinear(&d, &meta, 0.95, seed).map_err(|e| e.to_string())?;
        let r = common::max_abs_pairwise_r(kept.values());
        ensure!(r <= 0.95, "seed {seed}: max |r| = {r}");
        worst = worst.max(r);
    }
    // Near-duplicate covariate pairs with distinct ranks.
    let mut conflicts = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = 30;
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let other: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let covs = Array2::from_shape_fn((n, 3), |(i, j)| match j {
            0 | 1 => base[i] + 1e-4 * rng.random_range(-1.0..1.0),
            _ => other[i],
        });
        let ra = rng.random_range(1..=10u8);
        let rb = loop {
            let r = rng.random_range(1..=10u8);
            if r != ra {
                break r;
            }
        };
        let names = vec!["a".to_string(), "b".to_string(), "o".to_string()];
        let meta = [CovariateMeta::new("a", ra), CovariateMeta::new("b", rb), CovariateMeta::new("o", 1)];
        let d = build_design(&expansion_terms(&names, 1), &names, &covs, &vec!["S".to_string(); n]).unwrap();
        let (kept, log) = filter_collinear(&d, &meta, 0.95, seed).map_err(|e| e.to_string())?;
        let (winner, loser) = if ra < rb { ("a", "b") } else { ("b", "a") };
        let ids = kept.column_ids();
        let mentions = |id: &str, c: &str| TermSpec::parse(id).unwrap().covariates().contains(&c);
        ensure!(ids.contains(&winner.to_string()), "seed {seed}: ranks a={ra} b={rb}, kept {ids:?}");
        ensure!(!ids.iter().any(|id| mentions(id, loser)), "seed {seed}: ranks a={ra} b={rb}, kept {ids:?}");
        ensure!(
            log.iter().filter(|r| r.discarded == loser).all(|r| r.retained == winner),
            "seed {seed}: log {log:?}"
        );
        conflicts += 1;
    }
    Ok(format!("50 instances, worst kept |r| {worst:.4}; {conflicts} rank conflicts resolved to the preferred covariate"))
}

fn c5_standardization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (n, p) = (35, 6);
    let train = Array2::from_shape_fn((n, p), |(_, j)| 3.0 * j as f64 + (j + 1) as f64 * rng.random_range(-1.0..1.0));
    let terms: Vec<TermSpec> = (0..p).map(|j| TermSpec::polynomial(format!("x{j}"), 1)).collect();
    let raw = RawDesign::new(train.clone(), terms.clone(), vec!["S".into(); n]).unwrap();
    let (x, t) = fit_transform(&raw).map_err(|e| e.to_string())?;
    let mut dev = 0.0_f64;
    for col in x.values().columns() {
        let mean = col.sum() / n as f64;
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        dev = dev.max(mean.abs()).max((norm - 1.0).abs());
    }
    ensure!(dev <= 1e-10, "training deviation {dev:e}");
    let m = 2200;
    let big = Array2::from_shape_fn((m, p), |(_, j)| 3.0 * j as f64 + 2.0 * (j + 1) as f64 * rng.random_range(-1.0..1.0));
    let replay = apply_transform(&RawDesign::new(big.clone(), terms, vec!["S".into(); m]).unwrap(), &t).map_err(|e| e.to_string())?;
    let mut replay_err = 0.0_f64;
    for j in 0..p {
        let col = train.column(j);
        let mean = col.sum() / n as f64;
        let norm = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        for i in 0..m {
            let want = (big[[i, j]] - mean) / norm;
            replay_err = replay_err.max((replay.values()[[i, j]] - want).abs() / want.abs().max(1.0));
        }
    }
    ensure!(replay_err <= 1e-12, "replay deviates by {replay_err:e}");
    let back = inverse_transform(&replay, &vec!["S".to_string(); m], &t).map_err(|e| e.to_string())?;
    let trip = (&back.values().view() - &big.view()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    ensure!(trip <= 1e-10, "round trip error {trip:e}");
    Ok(format!("training {dev:.1e}, replay {replay_err:.1e}, round trip {trip:.1e}"))
}

fn c6_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = 0.0_f64;
    for _ in 0..500 {
        let k = rng.random_range(1..=500);
        let sse: Vec<f64> = (0..k).map(|_| 10f64.powf(rng.random_range(-6.0..4.0))).collect();
        let w = ensemble_weights(&sse).map_err(|e| e.to_string())?;
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    ensure!(worst <= 1e-12, "weight sum off by {worst:e}");
    let two = ensemble_weights(&[1.0, 3.0]).map_err(|e| e.to_string())?;
    ensure!(two == vec![0.75, 0.25], "(1, 3) gave {two:?}");
    Ok(format!("500 sets, worst |sum - 1| {worst:.1e}; (1, 3) -> (0.75, 0.25)"))
}

/// Synthetic quickstart inputs written to a scratch directory, plus a
/// config pointing at them.
struct Quickstart {
    dir: tempfile::TempDir,
}

impl Quickstart {
    fn new() -> Self {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../quickstart");
        let dir = tempfile::tempdir().unwrap();
        let spec: SyntheticSpec = toml::from_str(&std::fs::read_to_string(root.join("synth.toml")).unwrap()).unwrap();
        write_synthetic(&generate_synthetic(&spec).unwrap(), &dir.path().join("data")).unwrap();
        std::fs::copy(root.join("run.toml"), dir.path().join("run.toml")).unwrap();
        Self { dir }
    }

    fn run(&self, workers: usize, output: &str) -> Result<PathBuf, String> {
        let mut cfg = RunConfig::load(&self.dir.path().join("run.toml")).map_err(|e| e.to_string())?;
        cfg.workers = workers;
        cfg.output = self.dir.path().join(output);
        execute_run(&cfg).map_err(|e| e.to_string())?;
        Ok(cfg.output)
    }
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let k = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|row| row.unwrap()[k].parse().unwrap()).collect()
}

fn c7_decomposition(qs: &Quickstart) -> Outcome {
    let out = qs.run(4, "run_w4")?;
    let m2 = column(&out.join("residuals_m2.csv"), "predicted");
    let p3 = column(&out.join("residuals_m3.csv"), "predicted");
    let s1 = column(&out.join("residuals_m3.csv"), "stage1");
    let s2 = column(&out.join("residuals_m3.csv"), "stage2");
    ensure!(p3.len() == 116 && m2.len() == 116, "expected 116 rows");
    let mut worst = 0.0_f64;
    for i in 0..p3.len() {
        ensure!(s1[i] == m2[i], "row {i}: stage 1 differs from the global ensemble");
        worst = worst.max((p3[i] - (m2[i] + s2[i])).abs());
    }
    ensure!(worst <= 1e-12, "largest deviation {worst:e}");
    Ok(format!("116 points, 500 splits, largest deviation {worst:.1e}"))
}

fn recovery_spec(seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::two_site_default(seed);
    spec.covariates = (0..17)
        .map(|i| CovariateSpec {
            name: format!("X{i}"),
            length_scale: 120.0 + 15.0 * i as f64,
            source: CovariateSource::Raster,
            mean: 0.0,
            sd: 1.0,
        })
        .collect();
    spec.truth = TruthSpec {
        intercept: 1.0,
        global: [("X0", 1.0), ("X1", -0.8), ("X2^2", 0.6), ("X3:X4", 0.7), ("X5", 0.6)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        site: BTreeMap::new(),
    };
    spec.noise_ratio = 0.2;
    spec
}

fn c8_recovery() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(&recovery_spec(88)).map_err(|e| e.to_string())?;
    ensure!(data.points.len() == 116, "{} observations", data.points.len());
    let cands = expand_terms(&data.points, 4).map_err(|e| e.to_string())?.n_cols();
    let plan = make_splits(&data.points, 100, &quota(&["B1", "B2"], 35), 88).map_err(|e| e.to_string())?;
    let settings = MethodSettings {
        max_order: 4,
        ..MethodSettings::default()
    };
    let run = run_methods(&data.points, &plan, &settings, &[Method::GlobalOnly]).map_err(|e| e.to_string())?;
    let m2 = &run[0];
    let ranked = tally_selection(&m2.ensemble).ranked();
    let top: Vec<&str> = ranked.iter().take(10).map(|(t, _)| t.as_str()).collect();
    let missing: Vec<&String> = data.truth.active_terms.iter().filter(|t| !top.contains(&t.as_str())).collect();
    let r2 = m2.metrics["combined"].r_squared;
    let t = start.elapsed();
    let detail = format!(
        "{cands} candidates ({} after filtering), top 10 {top:?}, R² {r2:.3}, {:.1}s",
        m2.ensemble.terms.len(),
        t.as_secs_f64()
    );
    ensure!(missing.is_empty(), "true terms outside the top 10: {missing:?}; {detail}");
    ensure!(r2 >= 0.7, "R² {r2:.3} below 0.7; {detail}");
    ensure!(t < Duration::from_secs(300), "runtime; {detail}");
    Ok(detail)
}

fn transfer_spec(seed: u64, delta: f64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::two_site_default(seed);
    spec.covariates.truncate(3);
    for c in &mut spec.covariates {
        c.source = CovariateSource::Raster;
    }
    let names: Vec<String> = spec.covariates.iter().map(|c| c.name.clone()).collect();
    let wide = |id: &str, xll: f64| SiteSpec {
        id: id.into(),
        n_points: 60,
        ncols: 50,
        nrows: 44,
        xll,
        yll: 0.0,
        shift: BTreeMap::from([(names[0].clone(), delta)]),
        scale: names.iter().map(|n| (n.clone(), 3.0)).collect(),
    };
    let mut narrow = wide("B", 2000.0);
    narrow.n_points = 56;
    narrow.shift.clear();
    narrow.scale.clear();
    spec.sites = vec![wide("A", 0.0), narrow];
    spec.truth = TruthSpec {
        intercept: 2.0,
        global: BTreeMap::from([
            (names[0].clone(), 1.0),
            (format!("{}^2", names[0]), 0.5),
            (names[1].clone(), 0.5),
        ]),
        site: BTreeMap::new(),
    };
    spec.noise_ratio = 0.1;
    spec
}

fn c9_transfer() -> Outcome {
    let delta = 2.0;
    let data = generate_synthetic(&transfer_spec(99, delta)).map_err(|e| e.to_string())?;
    let plan = make_splits(&data.points, 100, &quota(&["A", "B"], 35), 99).map_err(|e| e.to_string())?;
    let settings = MethodSettings {
        max_order: 4,
        ..MethodSettings::default()
    };
    let methods = [Method::SiteSpecific("A".into()), Method::SiteSpecific("B".into())];
    let runs = run_methods(&data.points, &plan, &settings, &methods).map_err(|e| e.to_string())?;
    let a_to_b = runs[0].metrics["B"].r_squared;
    let b_to_a = runs[1].metrics["A"].r_squared;
    let detail = format!("delta {delta}: R²(A→B) {a_to_b:.3}, R²(B→A) {b_to_a:.3}");
    ensure!(b_to_a < 0.0 && a_to_b > 0.0, "{detail}");
    Ok(detail)
}

/// Pixel prediction from first principles: term values from the covariate
/// values, each member's stored mean and norm, then the weighted sum.
fn scalar_pixel(e: &Ensemble, values: &BTreeMap<String, f64>) -> f64 {
    let term_value = |id: &str| -> f64 {
        if let Some((a, b)) = id.split_once(':') {
            values[a] * values[b]
        } else if let Some((base, k)) = id.split_once('^') {
            values[base].powi(k.parse().unwrap())
        } else {
            values[id]
        }
    };
    e.members
        .iter()
        .zip(&e.weights)
        .map(|(m, w)| {
            let mut p = m.model.intercept;
            for (id, b) in &m.model.coefficients {
                let ct = m.transform.column(id).unwrap();
                p += b * (term_value(id) - ct.mean) / ct.norm;
            }
            w * p
        })
        .sum()
}

fn c10_raster() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec::two_site_default(10)).map_err(|e| e.to_string())?;
    let plan = make_splits(&data.points, 40, &quota(&["B1", "B2"], 35), 10).map_err(|e| e.to_string())?;
    let settings = MethodSettings {
        max_order: 2,
        ..MethodSettings::default()
    };
    let run = run_methods(&data.points, &plan, &settings, &[Method::GlobalOnly]).map_err(|e| e.to_string())?;
    let e = &run[0].ensemble;
    let rasters = &data.rasters["B1"];
    let out = predict_raster(e, rasters, "B1").map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for p in 0..out.len() {
        let vals: BTreeMap<String, f64> = rasters.iter().map(|(k, g)| (k.clone(), g.values()[p])).collect();
        worst = worst.max((out.values()[p] - scalar_pixel(e, &vals)).abs());
    }
    ensure!(worst <= 1e-10, "{} cells, worst deviation {worst:e}", out.len());

    let used = term_covariates(&e.terms);
    let mut holed = rasters.clone();
    let mut holes = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for name in &used {
        let g = &holed[name];
        let mut v = g.values().to_vec();
        for _ in 0..25 {
            let c = rng.random_range(0..v.len());
            v[c] = g.nodata();
            holes.insert(c);
        }
        holed.insert(name.clone(), g.with_values(v).unwrap());
    }
    let out2 = predict_raster(e, &holed, "B1").map_err(|e| e.to_string())?;
    let got: BTreeSet<usize> = (0..out2.len()).filter(|&p| out2.is_nodata(out2.values()[p])).collect();
    ensure!(got == holes, "nodata cells {} expected {}", got.len(), holes.len());
    for p in (0..out2.len()).filter(|p| !holes.contains(p)) {
        ensure!(out2.values()[p] == out.values()[p], "cell {p} changed by holes elsewhere");
    }
    Ok(format!(
        "{} cells, worst deviation {worst:.1e}; {} nodata cells closed over {} covariates",
        out.len(),
        holes.len(),
        used.len()
    ))
}

fn output_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name.ends_with(".csv") || name.ends_with(".asc") {
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

fn c11_determinism(qs: &Quickstart) -> Outcome {
    let a = qs.dir.path().join("run_w4");
    if !a.join("manifest.json").is_file() {
        qs.run(4, "run_w4")?;
    }
    let b = qs.run(1, "run_w1")?;
    let (fa, fb) = (output_files(&a), output_files(&b));
    ensure!(fa.keys().eq(fb.keys()), "file sets differ");
    let rasters = fa.keys().filter(|k| k.ends_with(".asc")).count();
    ensure!(rasters > 0, "no raster outputs");
    for (name, bytes) in &fa {
        ensure!(fb[name] == *bytes, "{name} differs between 4 and 1 workers");
    }
    Ok(format!("{} CSV and {rasters} raster files identical for 4 and 1 workers", fa.len() - rasters))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let qs = Quickstart::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("lasso path matches coordinate descent", Box::new(c1_lasso_oracle)),
        ("expansion count law", Box::new(c2_count_law)),
        ("site block structure", Box::new(c3_block_structure)),
        ("collinearity filter", Box::new(c4_filter)),
        ("standardization replay", Box::new(c5_standardization)),
        ("ensemble weights", Box::new(c6_weights)),
        ("two-stage decomposition", Box::new(|| c7_decomposition(&qs))),
        ("synthetic recovery", Box::new(c8_recovery)),
        ("transfer sign pattern", Box::new(c9_transfer)),
        ("raster prediction", Box::new(c10_raster)),
        ("determinism across workers", Box::new(|| c11_determinism(&qs))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
