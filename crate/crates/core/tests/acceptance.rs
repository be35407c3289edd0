//! Acceptance report. Prints one PASS/FAIL line per criterion.
//!
//! The dataset criteria read `paviau/` and `indian_pines/` (each holding
//! `cube.hdr`/`cube.raw` and `gt.hdr`/`gt.raw`, see `scripts/convert_datasets.py`)
//! from `$EARTHMAPPER_DATA`, or from `data/` at the workspace root. Without them
//! those criteria report FAIL and do not abort the run; every other criterion
//! must pass.

use std::path::PathBuf;
use std::time::Instant;

use earthmapper::datacube::{LabelMap, ProbabilityField};
use earthmapper::features::{fast_ica, Activation, IcaOptions, SmcaeModel, SmcaeSpec, Standardizer, Whitening};
use earthmapper::metrics::{oa_aa_kappa, paired_t_test, ConfusionMatrix};
use earthmapper::optim::NadamState;
use earthmapper::pipeline::{
    load_dataset, run_experiment_with_seeds, trial_seed, Dataset, DatasetConfig, ExperimentOutcome, ExtractorKind,
    PipelineConfig, UgmKind,
};
use earthmapper::ssmlp::{MlpSpec, TrainedMlp};
use earthmapper::ugm::{
    alpha_expansion, icm, meanfield_dense, meanfield_dense_direct, EnergyModel, PairwiseParams, Structure, UnaryField,
    MEANFIELD_ITERATIONS,
};
use ndarray::{array, Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Dataset criteria.
const TRIALS: usize = 10;
const PU_OA: (f64, f64) = (0.788, 0.05);
const PU_OA_CRF: (f64, f64) = (0.825, 0.05);
const IP_OA: (f64, f64) = (0.506, 0.06);
const IP_OA_CRF: (f64, f64) = (0.688, 0.08);
const MIN_CRF_WINS: usize = 9;
const CRF_P_MAX: f64 = 0.05;
const SMCAE_TRIALS: usize = 5;

// Exact-MAP oracle suite.
const MAP_INSTANCES: usize = 100;
const MAP_C3_MIN_EXACT: usize = 95;
const MAP_RUNTIME_S: f64 = 60.0;
const ENERGY_TOL: f64 = 1e-9;

// Mean-field equivalence suite.
const MF_INSTANCES: usize = 50;
const MF_FAST_VS_DIRECT: f64 = 1e-6;
const MF_W1_ZERO: f64 = 1e-12;
const MF_SIMPLEX: f64 = 1e-9;

// Numerical core.
const GRAD_REL_ERR: f64 = 1e-5;
const NADAM_TOL: f64 = 1e-10;
const ICA_MIN_CORR: f64 = 0.95;

// Metric oracles.
const TTEST_P_TOL: f64 = 1e-3;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
    needs_data: bool,
}

fn line(name: &'static str, pass: bool, detail: String) -> Line {
    Line { name, pass, detail, needs_data: false }
}

fn data_root() -> PathBuf {
    std::env::var_os("EARTHMAPPER_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn dataset(dir: &str) -> Result<Dataset, String> {
    let root = data_root().join(dir);
    let cfg = DatasetConfig {
        cube: root.join("cube.hdr"),
        data: None,
        truth: root.join("gt.hdr"),
        truth_data: None,
        name: Some(dir.to_string()),
    };
    if !cfg.cube.is_file() || !cfg.truth.is_file() {
        return Err(format!("dataset not found under {}", root.display()));
    }
    load_dataset(&cfg).map_err(|e| e.to_string())
}

fn experiment_config(kind: ExtractorKind, ugm: UgmKind, out: PathBuf) -> PipelineConfig {
    let text = "[dataset]\ncube = \"unused\"\ntruth = \"unused\"\n";
    let mut cfg = PipelineConfig::from_toml(text, std::path::Path::new(".")).unwrap();
    cfg.extractor.kind = kind;
    cfg.ugm.kind = ugm;
    cfg.experiment.out = out;
    cfg
}

fn mean_oa(o: &ExperimentOutcome, variant: &str) -> f64 {
    o.trials.iter().map(|t| t.variants[variant].oa).sum::<f64>() / o.trials.len() as f64
}

fn within(x: f64, (target, tol): (f64, f64)) -> bool {
    (x - target).abs() <= tol
}

/// Raw-pixel SS-MLP with and without the dense CRF on both benchmark scenes.
fn raw_benchmark_and_crf_direction() -> [Line; 2] {
    let tmp = tempfile::tempdir().unwrap();
    let mut table = Vec::new();
    let mut direction = Vec::new();
    let mut ok_table = true;
    let mut ok_dir = true;
    for (dir, base_tol, crf_tol) in [("paviau", PU_OA, PU_OA_CRF), ("indian_pines", IP_OA, IP_OA_CRF)] {
        let data = match dataset(dir) {
            Ok(d) => d,
            Err(e) => {
                ok_table = false;
                ok_dir = false;
                table.push(format!("{dir}: {e}"));
                direction.push(format!("{dir}: {e}"));
                continue;
            }
        };
        let cfg = experiment_config(ExtractorKind::Raw, UgmKind::DenseMeanfield, tmp.path().join(dir));
        let seeds: Vec<u64> = (0..TRIALS).map(|t| trial_seed(cfg.experiment.seed, t)).collect();
        let start = Instant::now();
        let out = match run_experiment_with_seeds(&cfg, &data, &seeds) {
            Ok(o) => o,
            Err(e) => {
                ok_table = false;
                ok_dir = false;
                table.push(format!("{dir}: {e}"));
                direction.push(format!("{dir}: {e}"));
                continue;
            }
        };
        let (b, c) = (mean_oa(&out, "SS-MLP"), mean_oa(&out, "SS-MLP+CRF"));
        let pass = out.trials.len() == TRIALS && within(b, base_tol) && within(c, crf_tol);
        ok_table &= pass;
        table.push(format!(
            "{dir}: OA {:.1} (target {:.1}±{:.0}), +CRF {:.1} (target {:.1}±{:.0}), {} trials in {:.0}s",
            100.0 * b,
            100.0 * base_tol.0,
            100.0 * base_tol.1,
            100.0 * c,
            100.0 * crf_tol.0,
            100.0 * crf_tol.1,
            out.trials.len(),
            start.elapsed().as_secs_f64()
        ));
        let oa = out.comparisons.iter().find(|c| c.metric == "oa").expect("CRF comparison");
        let pass = oa.wins >= MIN_CRF_WINS && oa.test.p < CRF_P_MAX;
        ok_dir &= pass;
        direction.push(format!("{dir}: CRF wins {}/{}, p = {:.2e}", oa.wins, oa.n, oa.test.p));
    }
    [
        Line {
            name: "Raw-pixel SS-MLP / SS-MLP+CRF mean OA",
            pass: ok_table,
            detail: table.join("; "),
            needs_data: true,
        },
        Line {
            name: "CRF improvement direction",
            pass: ok_dir,
            detail: direction.join("; "),
            needs_data: true,
        },
    ]
}

/// SMCAE trained on the scene beats raw pixels in mean OA over paired trials.
fn smcae_direction() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = false;
    for dir in ["paviau", "indian_pines"] {
        let data = match dataset(dir) {
            Ok(d) => d,
            Err(e) => {
                notes.push(format!("{dir}: {e}"));
                continue;
            }
        };
        let seeds: Vec<u64> = (0..SMCAE_TRIALS).map(|t| trial_seed(0, t)).collect();
        let raw = experiment_config(ExtractorKind::Raw, UgmKind::None, tmp.path().join(format!("{dir}-raw")));
        let smcae = experiment_config(ExtractorKind::Smcae, UgmKind::None, tmp.path().join(format!("{dir}-smcae")));
        match (run_experiment_with_seeds(&raw, &data, &seeds), run_experiment_with_seeds(&smcae, &data, &seeds)) {
            (Ok(r), Ok(s)) => {
                let (a, b) = (mean_oa(&r, "SS-MLP"), mean_oa(&s, "SMCAE+SS-MLP"));
                notes.push(format!("{dir}: SMCAE OA {:.1} vs raw {:.1}", 100.0 * b, 100.0 * a));
                pass |= b > a && r.trials.len() == SMCAE_TRIALS && s.trials.len() == SMCAE_TRIALS;
            }
            (r, s) => notes.push(format!("{dir}: {:?} / {:?}", r.err(), s.err())),
        }
    }
    Line {
        name: "SMCAE features beat raw pixels (substituted property)",
        pass,
        detail: notes.join("; "),
        needs_data: true,
    }
}

fn random_unary(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> UnaryField {
    UnaryField::new(Array3::from_shape_simple_fn((h, w, c), || rng.gen_range(0.0..3.0))).unwrap()
}

/// Energy recomputed from scratch on the 4-connected grid.
fn grid_energy(u: &UnaryField, p: &PairwiseParams, y: &[u16], w: usize) -> f64 {
    let e = u.energies();
    let h = y.len() / w;
    let wgt = p.w1 * (-1.0 / (2.0 * p.theta * p.theta)).exp();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let yi = y[r * w + c];
            total += e[[r, c, yi as usize - 1]];
            if c + 1 < w && y[r * w + c + 1] != yi {
                total += wgt;
            }
            if r + 1 < h && y[(r + 1) * w + c] != yi {
                total += wgt;
            }
        }
    }
    total
}

fn exhaustive_min(u: &UnaryField, p: &PairwiseParams) -> f64 {
    let (h, w, c) = u.energies().dim();
    let n = h * w;
    let mut y = vec![1u16; n];
    let mut best = f64::INFINITY;
    for mut code in 0..(c as u64).pow(n as u32) {
        for v in y.iter_mut() {
            *v = (code % c as u64) as u16 + 1;
            code /= c as u64;
        }
        best = best.min(grid_energy(u, p, &y, w));
    }
    best
}

fn flat(l: &LabelMap) -> Vec<u16> {
    l.labels().iter().copied().collect()
}

fn exact_map_suite() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut exact = [0usize; 2];
    let mut worst_ratio: f64 = 0.0;
    let mut icm_ok = true;
    for (slot, classes) in [2usize, 3].into_iter().enumerate() {
        for _ in 0..MAP_INSTANCES {
            let u = random_unary(3, 3, classes, &mut rng);
            let p = PairwiseParams::new(rng.gen_range(0.0..3.0), rng.gen_range(0.3..3.0)).unwrap();
            let model = EnergyModel::new(u.clone(), p, Structure::Grid4);
            let init = LabelMap::new(
                Array2::from_shape_simple_fn((3, 3), || rng.gen_range(1..=classes as u16)),
                classes,
            )
            .unwrap();
            let best = exhaustive_min(&u, &p);
            let e = grid_energy(&u, &p, &flat(&alpha_expansion(&model, &u.argmin_labels(), 20).unwrap()), 3);
            if (e - best).abs() < ENERGY_TOL {
                exact[slot] += 1;
            }
            worst_ratio = worst_ratio.max(e / best);
            let e0 = grid_energy(&u, &p, &flat(&init), 3);
            let e1 = grid_energy(&u, &p, &flat(&icm(&model, &init, 50).unwrap()), 3);
            icm_ok &= e1 <= e0 + ENERGY_TOL;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact[0] == MAP_INSTANCES
        && exact[1] >= MAP_C3_MIN_EXACT
        && worst_ratio <= 2.0 + ENERGY_TOL
        && icm_ok
        && secs < MAP_RUNTIME_S;
    line(
        "Exact-MAP oracle suite",
        pass,
        format!(
            "C=2 exact {}/{MAP_INSTANCES}, C=3 exact {}/{MAP_INSTANCES}, worst ratio {worst_ratio:.4}, ICM monotone {icm_ok}, {secs:.1}s",
            exact[0], exact[1]
        ),
    )
}

fn random_proba(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ProbabilityField {
    let mut v = Array3::from_shape_simple_fn((h, w, c), || rng.gen_range(0.01..1.0f64));
    for mut px in v.lanes_mut(ndarray::Axis(2)) {
        let s = px.sum();
        px /= s;
    }
    ProbabilityField::new(v).unwrap()
}

fn unary_of(p: &ProbabilityField) -> UnaryField {
    UnaryField::new(p.values().mapv(|x| -x.max(1e-12).ln())).unwrap()
}

fn meanfield_suite() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_direct: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    let mut worst_simplex: f64 = 0.0;
    for _ in 0..MF_INSTANCES {
        let p = random_proba(8, 8, 3, &mut rng);
        let u = unary_of(&p);
        let params = PairwiseParams::new(rng.gen_range(0.1..3.0), rng.gen_range(0.5..4.0)).unwrap();
        let model = EnergyModel::new(u.clone(), params, Structure::Dense);
        let fast = meanfield_dense(&model, MEANFIELD_ITERATIONS).unwrap();
        let direct = meanfield_dense_direct(&model, MEANFIELD_ITERATIONS).unwrap();
        let d = (fast.values() - direct.values()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        worst_direct = worst_direct.max(d);

        let zero = EnergyModel::new(u.clone(), PairwiseParams::new(0.0, params.theta).unwrap(), Structure::Dense);
        let q0 = meanfield_dense(&zero, MEANFIELD_ITERATIONS).unwrap();
        let d0 = (q0.values() - p.values()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        worst_zero = worst_zero.max(d0);

        for it in 1..=MEANFIELD_ITERATIONS {
            let q = meanfield_dense(&model, it).unwrap();
            for px in q.values().lanes(ndarray::Axis(2)) {
                let dev = (px.sum() - 1.0).abs().max(-px.fold(0.0, |a: f64, &b| a.min(b)));
                worst_simplex = worst_simplex.max(dev);
            }
        }
    }
    let pass = worst_direct < MF_FAST_VS_DIRECT && worst_zero < MF_W1_ZERO && worst_simplex < MF_SIMPLEX;
    line(
        "Mean-field equivalence suite",
        pass,
        format!(
            "{MF_INSTANCES} instances: fast vs direct {worst_direct:.2e}, w1=0 vs P {worst_zero:.2e}, simplex deviation {worst_simplex:.2e}"
        ),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn central_difference(params: &mut [f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + h;
            let fp = f(params);
            params[i] = orig - h;
            let fm = f(params);
            params[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    sab / (saa * sbb).sqrt()
}

fn numerical_core() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut mlp_err: f64 = 0.0;
    for (seed, wd, aux) in [(1u64, 0.0, 0.0), (2, 1e-3, 0.0), (3, 1e-2, 0.5)] {
        let mut spec = MlpSpec::new(3, 3, 2, 64, wd).unwrap();
        spec.aux_weight = aux;
        let mut model = TrainedMlp::init(spec, seed).unwrap();
        let x = Array2::from_shape_simple_fn((7, 3), || rng.gen_range(-1.0..1.0));
        let labels = [1u16, 2, 3, 0, 1, 2, 0];
        let analytic = model.gradients(&x.view(), &labels).unwrap().grad;
        let spec = model.spec.clone();
        let numeric = central_difference(&mut model.params, |p| {
            let m = TrainedMlp { spec: spec.clone(), params: p.to_vec(), history: vec![], best_epoch: 0 };
            m.gradients(&x.view(), &labels).unwrap().loss
        });
        mlp_err = mlp_err.max(rel_err(&analytic, &numeric));
    }

    let mut smcae_err: f64 = 0.0;
    for (act, seed) in [(Activation::Relu, 1u64), (Activation::Linear, 2)] {
        let spec = SmcaeSpec {
            channels: vec![3, 4],
            loss_weights: vec![1.0, 0.7],
            activation: act,
            ..Default::default()
        };
        let scaler = Standardizer { means: Array1::zeros(2), stds: Array1::ones(2), epsilon: 1e-8 };
        let model = SmcaeModel::init(spec, 2, scaler, seed).unwrap();
        let x = Array4::from_shape_simple_fn((2, 5, 4, 2), || rng.gen_range(-1.0..1.0));
        let analytic = model.loss_and_gradient(&model.params, &x).gradient;
        let mut params = model.params.clone();
        let numeric = central_difference(&mut params, |p| model.loss_and_gradient(p, &x).total);
        smcae_err = smcae_err.max(rel_err(&analytic, &numeric));
    }

    // One Nadam step from a zero state with g = 1, lr = 0.002, β1 = 0.9, β2 = 0.999, ε = 1e-8:
    // m = 0.1, v = 0.001, m̄ = 0.9·0.1/(1 − 0.9²) + 0.1·1/(1 − 0.9), v̂ = 1.
    let m_bar = 0.9 * 0.1 / (1.0 - 0.81) + 0.1 / (1.0 - 0.9);
    let expected = -0.002 * m_bar / (1.0 + 1e-8);
    let mut opt = NadamState::new(1, 0.002);
    let mut theta = vec![0.0];
    opt.step(&mut theta, &[1.0]).unwrap();
    let nadam_err = (theta[0] - expected).abs();

    let n = 4000;
    let s = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-1.0..1.0));
    let mix = array![[1.0, 0.6], [0.4, 1.0]];
    let x = s.dot(&mix.t());
    let wh = Whitening::fit(&x.view(), 2).unwrap();
    let z = wh.apply(&x.view());
    let ica = fast_ica(&z.view(), &IcaOptions { seed: 9, ..Default::default() }).unwrap();
    let y = z.dot(&ica.unmixing.t());
    let min_corr = (0..2)
        .map(|src| {
            (0..2)
                .map(|c| pearson(&s.column(src).to_vec(), &y.column(c).to_vec()).abs())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);

    let pass = mlp_err < GRAD_REL_ERR && smcae_err < GRAD_REL_ERR && nadam_err < NADAM_TOL && min_corr > ICA_MIN_CORR;
    line(
        "Numerical core checks",
        pass,
        format!(
            "MLP grad rel err {mlp_err:.2e}, SMCAE grad rel err {smcae_err:.2e}, Nadam step err {nadam_err:.1e}, ICA min |corr| {min_corr:.4}"
        ),
    )
}

fn metric_oracles() -> Line {
    let cm = ConfusionMatrix::from_counts(array![[2u64, 0], [1, 1]]).unwrap();
    let m = oa_aa_kappa(&cm).unwrap();
    let cm_ok = m.oa == 0.75 && m.kappa == 0.5 && m.aa == 0.75;
    // With 2 degrees of freedom the Student-t CDF has the closed form
    // P(|T| ≥ t) = 1 − t / sqrt(t² + 2); d = (1, 2, 3) gives t = 2·sqrt(3).
    let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
    let t_ref = 2.0 * 3f64.sqrt();
    let p_ref = 1.0 - t_ref / (t_ref * t_ref + 2.0).sqrt();
    let p_ok = (t.p - p_ref).abs() < TTEST_P_TOL && (t.t - t_ref).abs() < 1e-12 && t.df == 2;
    line(
        "Metric oracles",
        cm_ok && p_ok,
        format!(
            "OA {} AA {} kappa {}; t = {:.4}, p = {:.5} (reference {p_ref:.5})",
            m.oa, m.aa, m.kappa, t.t, t.p
        ),
    )
}

fn main() -> std::process::ExitCode {
    let mut lines = Vec::new();
    lines.extend(raw_benchmark_and_crf_direction());
    lines.push(smcae_direction());
    lines.push(exact_map_suite());
    lines.push(meanfield_suite());
    lines.push(numerical_core());
    lines.push(metric_oracles());
    for l in &lines {
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass && !l.needs_data).map(|l| l.name).collect();
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("failed: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
