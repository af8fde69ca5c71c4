//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The training criteria run the full default
//! protocol and take tens of minutes on one core.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use reachsteer::agent::{AgentBundle, AgentConfig};
use reachsteer::approximator::Net;
use reachsteer::codec::ActionCodec;
use reachsteer::dynamics::{ToyDenoiser, ZeroAction};
use reachsteer::harness::{self, io::parse_trace_csv, AblationReport, RunConfig, Setup};
use reachsteer::reachability::{
    action_lattice, compute_brt_oracle, safety_backup, tabular_fixed_point, target_ell_from_norm,
    FiniteMdp, GridSpec, OracleOptions, TargetFnParams,
};
use reachsteer::rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn work_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn backup_table() -> Outcome {
    // (ℓ_t, Q', γ, terminal, ℓ_T, expected); dyadic values keep the arithmetic exact.
    let table: [(f64, f64, f64, bool, f64, f64); 20] = [
        (0.5, 0.25, 0.5, false, 0.0, 0.375),
        (0.5, 0.75, 0.5, false, 0.0, 0.5),
        (-0.5, 0.25, 0.5, false, 0.0, -0.5),
        (0.25, -0.5, 0.5, false, 0.0, -0.125),
        (1.0, 1.0, 0.75, false, 0.0, 1.0),
        (1.0, -1.0, 0.75, false, 0.0, -0.5),
        (0.0, 0.5, 0.75, false, 0.0, 0.0),
        (0.5, 0.0, 0.75, false, 0.0, 0.125),
        (-0.25, -0.75, 0.25, false, 0.0, -0.375),
        (0.75, 0.5, 0.25, false, 0.0, 0.6875),
        (0.5, -2.0, 1.0, false, 0.0, -2.0),
        (0.5, 2.0, 1.0, false, 0.0, 0.5),
        (0.5, -2.0, 0.0, false, 0.0, 0.5),
        (-0.125, 0.5, 0.875, false, 0.0, -0.125),
        (0.5, 0.25, 0.5, true, -0.25, -0.25),
        (-1.0, 0.5, 0.5, true, 0.75, 0.75),
        (0.5, -1.0, 0.99, true, 0.5, 0.5),
        (0.0, 0.0, 0.5, true, 0.0, 0.0),
        (1.0, 1.0, 0.25, true, -1.0, -1.0),
        (0.25, 0.125, 0.5, false, 0.0, 0.1875),
    ];
    let mut bad = Vec::new();
    for (i, &(l, q, g, term, lt, want)) in table.iter().enumerate() {
        let got = safety_backup(l, q, g, term, lt);
        if got != want {
            bad.push(format!("case {i}: {got} != {want}"));
        }
    }
    // 0 -> 1 -> 2 -> 2 with margins 0.5, -0.2, 0.8 and γ = 0.9, by hand.
    let mdp = FiniteMdp {
        next: vec![vec![1], vec![2], vec![2]],
        ell: vec![0.5, -0.2, 0.8],
        terminal: vec![false; 3],
    };
    let fp = tabular_fixed_point(&mdp, 0.9, None, 1e-14, 100_000).map_err(|e| e.to_string())?;
    // V2 = 0.8; V1 = 0.1·(−0.2) + 0.9·min(−0.2, 0.8) = −0.2; V0 = 0.1·0.5 + 0.9·min(0.5, −0.2) = −0.13.
    let hand = [-0.13, -0.2, 0.8];
    let err = (0..3).map(|s| (fp.q[s][0] - hand[s]).abs()).fold(0.0, f64::max);
    if err > 1e-8 {
        bad.push(format!("chain error {err:e}"));
    }
    check(bad.is_empty(), if bad.is_empty() { format!("20 cases exact, chain error {err:.1e}") } else { bad.join("; ") })
}

/// Guidance norm from the environment description: the conditional branch
/// targets a memorized latent inside its (basin-widened) trigger ball and
/// `A·e` elsewhere; the unconditional branch targets the base attractor.
fn guidance_norm_by_definition(env: &ToyDenoiser, x: &[f64], e: &[f64]) -> f64 {
    let c = env.config();
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mut best: Option<(f64, &Vec<f64>)> = None;
    for m in &c.memorized_targets {
        let dx = d(x, &m.target);
        let radius = m.radius * (1.0 + c.guidance_gain * (-dx * dx / (2.0 * c.capture_width.powi(2))).exp());
        let de = d(e, &m.trigger);
        if de < radius && best.is_none_or(|(bd, _)| de < bd) {
            best = Some((de, &m.target));
        }
    }
    let y: Vec<f64> = match best {
        Some((_, t)) => t.clone(),
        None => c.cond_map.iter().map(|row| row.iter().zip(e).map(|(a, b)| a * b).sum()).collect(),
    };
    d(&y, &c.base_attractor)
}

fn oracle_fidelity() -> Outcome {
    let cfg = RunConfig::default();
    let setup = Setup::from_config(&cfg).map_err(|e| e.to_string())?;
    let (env, codec, target) = (&setup.env, &setup.codec, &setup.target);
    let cap = env.triggered_captions()[0].clone();
    let full = GridSpec::auto(env, codec, 41, 3).map_err(|e| e.to_string())?;
    if full.action_grid.len() != 9 || env.horizon() != 20 {
        return Err("unexpected default grid".into());
    }
    let brt = compute_brt_oracle(env, codec, &cap, target, &full, &OracleOptions::default()).map_err(|e| e.to_string())?;
    let t = brt.horizon;
    let mut worst: f64 = 0.0;
    for i in 0..brt.grid.len() {
        let x = brt.grid.coords(i);
        let best = full
            .action_grid
            .iter()
            .map(|u| {
                let eu = codec.steer(&cap.e, u).unwrap();
                target_ell_from_norm(guidance_norm_by_definition(env, &x, &eu), target)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((brt.values[t][i] - best).abs());
    }
    let mut monotone = true;
    for levels in [vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]], action_lattice(2, 1)] {
        let mut spec = full.clone();
        spec.action_grid = levels;
        let small = compute_brt_oracle(env, codec, &cap, target, &spec, &OracleOptions::default()).map_err(|e| e.to_string())?;
        for s in 0..=t {
            for i in 0..brt.grid.len() {
                monotone &= !brt.mask[s][i] || small.mask[s][i];
            }
        }
    }
    check(worst < 1e-12 && monotone, format!("terminal layer error {worst:.1e}, monotone under shrinkage: {monotone}"))
}

struct Ablations {
    reports: Vec<AblationReport>,
    dirs: Vec<PathBuf>,
}

fn run_ablations(seeds: &[u64]) -> Result<Ablations, String> {
    let cfg = RunConfig::default();
    let mut reports = Vec::new();
    let mut dirs = Vec::new();
    for &s in seeds {
        let dir = work_dir().join(format!("ablate-{s}"));
        let t0 = Instant::now();
        let r = harness::cmd_ablate(&cfg, s, &dir).map_err(|e| e.to_string())?;
        eprintln!(
            "seed {s}: constrained failure {:.2}, ablation failure {:.2} ({:.0}s)",
            r.constrained.eval.failure_rate,
            r.ablation.eval.failure_rate,
            t0.elapsed().as_secs_f64()
        );
        reports.push(r);
        dirs.push(dir);
    }
    Ok(Ablations { reports, dirs })
}

fn critic_agreement(ab: &Ablations) -> Outcome {
    let cfg = RunConfig::default();
    let setup = Setup::from_config(&cfg).map_err(|e| e.to_string())?;
    let dir = ab.dirs[0].join("constrained");
    let ckpt = if dir.join(harness::BEST_CHECKPOINT).exists() {
        dir.join(harness::BEST_CHECKPOINT)
    } else {
        dir.join(harness::FINAL_CHECKPOINT)
    };
    let bundle = harness::load_agent(&ckpt, &setup).map_err(|e| e.to_string())?;
    let caption = harness::oracle_caption(&cfg, &setup).map_err(|e| e.to_string())?;
    let brt = harness::oracle_grid(&cfg, &setup).map_err(|e| e.to_string())?;
    let a = harness::critic_agreement(&setup, &bundle, &brt, &caption).map_err(|e| e.to_string())?;
    check(a >= 0.85, format!("sign agreement {:.1}% (need >= 85%)", 100.0 * a))
}

fn ablation_gap(ab: &Ablations) -> Outcome {
    let n = ab.reports.len() as f64;
    let rollouts: Vec<usize> = ab.reports.iter().map(|r| r.constrained.eval.rollouts).collect();
    let c = ab.reports.iter().map(|r| r.constrained.eval.failure_rate).sum::<f64>() / n;
    let a = ab.reports.iter().map(|r| r.ablation.eval.failure_rate).sum::<f64>() / n;
    let per: Vec<String> = ab
        .reports
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.constrained.eval.failure_rate, r.ablation.eval.failure_rate))
        .collect();
    check(
        a - c >= 0.2 && rollouts.iter().all(|&r| r >= 100),
        format!("failure constrained {c:.3} vs ablation {a:.3}, gap {:.3} (per seed {})", a - c, per.join(", ")),
    )
}

fn guidance_steering(ab: &Ablations) -> Outcome {
    let read = |p: PathBuf| -> Result<Vec<f64>, String> {
        let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        Ok(harness::io::mean_guidance_from_rows(&parse_trace_csv(&text).map_err(|e| e.to_string())?))
    };
    let agent = read(ab.dirs[0].join("constrained/eval").join(harness::TRACE_FILE))?;
    let base = read(ab.dirs[0].join("baseline").join(harness::TRACE_FILE))?;
    if agent.len() != base.len() || agent.len() < 6 {
        return Err(format!("trace lengths {} and {}", agent.len(), base.len()));
    }
    let below = (5..agent.len()).all(|t| agent[t] < base[t]);
    let gap = base[base.len() - 1] - agent[agent.len() - 1];
    check(below && gap >= 1.0, format!("below baseline for t >= 5: {below}, final gap {gap:.2}"))
}

fn worst_gradient_error(net: &Net, seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[77]);
    let x: Vec<f64> = (0..net.input_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..net.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |n: &Net| -> f64 { n.forward(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
    let g = net.backward(&x, &w).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = r.random_range(0..net.num_params());
        let (mut p, mut m) = (net.clone(), net.clone());
        p.params_mut()[i] += h;
        m.params_mut()[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max((fd - g.params[i]).abs() / fd.abs().max(g.params[i].abs()).max(1e-7));
    }
    worst
}

fn gradient_checks() -> Outcome {
    let setup = Setup::from_config(&RunConfig::default()).map_err(|e| e.to_string())?;
    let b = AgentBundle::new(setup.env.observation_dim(), 2, &AgentConfig::default(), 0).map_err(|e| e.to_string())?;
    let worst = [&b.actor, &b.q1, &b.q2, &b.q_safe]
        .iter()
        .enumerate()
        .map(|(k, n)| worst_gradient_error(n, k as u64))
        .fold(0.0, f64::max);
    check(worst <= 1e-3, format!("worst relative error {worst:.1e} over 4 networks x 100 probes"))
}

fn target_table() -> Outcome {
    let p = TargetFnParams { eta: 0.1, beta: 9.0 };
    let a = target_ell_from_norm(p.beta, &p);
    let b = target_ell_from_norm(p.beta + 10.0, &p);
    let c = target_ell_from_norm(p.beta + 1000.0, &p);
    let ok = a.abs() < 1e-6 && (b + 1f64.tanh()).abs() < 1e-6 && (c + 1.0).abs() < 1e-9;
    check(ok, format!("l(beta) = {a:.2e}, l(beta+10) = {b:.6}, l(beta+1000) = {c:.12}"))
}

fn dual_behaviour() -> Outcome {
    let cfg = AgentConfig {
        hidden: vec![4],
        init_lambda: 0.0,
        ..AgentConfig::default()
    };
    let mut b = AgentBundle::new(3, 1, &cfg, 0).map_err(|e| e.to_string())?;
    let mut prev = b.lambda;
    let mut increasing = true;
    for _ in 0..5000 {
        let l = b.lambda_step(-0.2);
        increasing &= l > prev;
        prev = l;
    }
    let peak = prev;
    let mut nonneg = true;
    let mut stays = true;
    let mut reached = None;
    for k in 0..20_000 {
        let l = b.lambda_step(0.2);
        nonneg &= l >= 0.0;
        if reached.is_some() {
            stays &= l == 0.0;
        } else if l == 0.0 {
            reached = Some(k);
        }
    }
    check(
        increasing && nonneg && stays && reached.is_some(),
        format!("rises to {peak:.2e} under violation, back to 0 after {reached:?} steps and stays"),
    )
}

fn determinism() -> Outcome {
    let base = work_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&base);
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = base.join(run);
        let st = Command::new(env!("CARGO_BIN_EXE_reachsteer"))
            .args(["train", "--threads", "1", "--seed", "0", "--set", "agent.epochs=5", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !st.status.success() {
            return Err(String::from_utf8_lossy(&st.stderr).into_owned());
        }
        outs.push(out);
    }
    let mut same = Vec::new();
    for f in [harness::FINAL_CHECKPOINT, harness::BEST_CHECKPOINT, harness::TRAIN_LOG, harness::BEST_MARKER] {
        let a = std::fs::read(outs[0].join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(outs[1].join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs"));
        }
        same.push(f);
    }
    Ok(format!("identical: {}", same.join(", ")))
}

fn lock_in() -> Outcome {
    let setup = Setup::from_config(&RunConfig::default()).map_err(|e| e.to_string())?;
    let caps = setup.env.triggered_captions();
    if caps.len() < 50 {
        return Err(format!("only {} triggered captions", caps.len()));
    }
    let zero = ZeroAction { dim: 2 };
    let mut worst_k = 0;
    for (i, c) in caps.iter().take(50).enumerate() {
        let ep = setup
            .env
            .rollout(&setup.codec, &setup.target, c, &zero, 500 + i as u64)
            .map_err(|e| e.to_string())?;
        let d: Vec<f64> = ep.trace.iter().map(|r| r.distance_to_nearest_target.unwrap()).collect();
        // Smallest K after which the distance never increases.
        let k = (0..d.len()).find(|&k| d[k..].windows(2).all(|w| w[1] <= w[0])).unwrap();
        worst_k = worst_k.max(k);
    }
    check(worst_k <= 5, format!("distance non-increasing from step {worst_k} on, 50 captions"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| match r {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("criterion {n:>2} FAIL  {name}: {d}");
        }
    };
    report(1, "safety backup", backup_table());
    report(2, "oracle fidelity", oracle_fidelity());
    let t = Instant::now();
    match run_ablations(&[0, 1, 2]) {
        Ok(ab) => {
            eprintln!("training and evaluation took {:.0}s", t.elapsed().as_secs_f64());
            report(3, "critic/oracle agreement", critic_agreement(&ab));
            report(4, "constraint ablation", ablation_gap(&ab));
            report(5, "guidance-norm steering", guidance_steering(&ab));
        }
        Err(e) => {
            for (n, name) in [(3, "critic/oracle agreement"), (4, "constraint ablation"), (5, "guidance-norm steering")] {
                report(n, name, Err(format!("training failed: {e}")));
            }
        }
    }
    report(6, "gradient checks", gradient_checks());
    report(7, "target function table", target_table());
    report(8, "dual update", dual_behaviour());
    report(9, "determinism", determinism());
    report(10, "lock-in", lock_in());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
