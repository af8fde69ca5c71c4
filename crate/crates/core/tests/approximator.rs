use rand::Rng;
use reachsteer::agent::{AgentBundle, AgentConfig};
use reachsteer::approximator::{polyak_update, AdamConfig, Checkpoint, Net, OptimState};
use reachsteer::rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central differences of `⟨w, f(x)⟩` at 100 random parameter and input
/// coordinates; returns the worst relative error.
fn worst_gradient_error(net: &Net, seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[99]);
    let x: Vec<f64> = (0..net.input_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..net.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let objective = |n: &Net, x: &[f64]| -> f64 {
        n.forward(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let g = net.backward(&x, &w).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for probe in 0..100 {
        if probe % 5 == 4 {
            let i = r.random_range(0..x.len());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (objective(net, &xp) - objective(net, &xm)) / (2.0 * h);
            worst = worst.max(rel_err(fd, g.input[i]));
        } else {
            let i = r.random_range(0..net.num_params());
            let (mut np, mut nm) = (net.clone(), net.clone());
            np.params_mut()[i] += h;
            nm.params_mut()[i] -= h;
            let fd = (objective(&np, &x) - objective(&nm, &x)) / (2.0 * h);
            worst = worst.max(rel_err(fd, g.params[i]));
        }
    }
    worst
}

#[test]
fn every_agent_network_passes_gradient_check() {
    let cfg = AgentConfig::default();
    let b = AgentBundle::new(11, 2, &cfg, 3).unwrap();
    for (name, net) in [("actor", &b.actor), ("task critic", &b.q1), ("safety critic", &b.q_safe)] {
        let e = worst_gradient_error(net, 17);
        assert!(e <= 1e-3, "{name}: worst relative error {e:e}");
    }
}

#[test]
fn small_random_nets_pass_gradient_check() {
    for (k, sizes) in [vec![3, 5, 2], vec![4, 7, 7, 3], vec![6, 1]].iter().enumerate() {
        let net = Net::new(sizes, &mut rng::stream(k as u64, &[1])).unwrap();
        assert!(worst_gradient_error(&net, k as u64) <= 1e-3, "{sizes:?}");
    }
}

#[test]
fn batch_backward_sums_single_gradients() {
    let net = Net::new(&[3, 6, 2], &mut rng::stream(5, &[1])).unwrap();
    let xs = [0.2, -0.4, 0.9, -1.0, 0.3, 0.1];
    let up = [1.0, -0.5, 0.25, 2.0];
    let cache = net.forward_batch(&xs, 2).unwrap();
    let g = net.backward_batch(&cache, &up).unwrap();
    let g0 = net.backward(&xs[..3], &up[..2]).unwrap();
    let g1 = net.backward(&xs[3..], &up[2..]).unwrap();
    for i in 0..net.num_params() {
        assert!((g.params[i] - g0.params[i] - g1.params[i]).abs() < 1e-12);
    }
    assert_eq!(&g.input[..3], &g0.input[..]);
}

#[test]
fn adam_first_step_and_sign_limit() {
    let mut p = vec![1.0, -2.0];
    let mut s = OptimState::new(2, AdamConfig::with_lr(0.01));
    s.step(&mut p, &[3.0, -0.001]).unwrap();
    // Bias-corrected first step moves each coordinate by lr against its sign.
    assert!((p[0] - 0.99).abs() < 1e-8);
    assert!((p[1] + 1.99).abs() < 1e-5);
    assert_eq!(s.step, 1);

    let mut p = vec![0.0, 0.0];
    let mut s = OptimState::new(2, AdamConfig::with_lr(0.01));
    for _ in 0..1000 {
        let before = p[0];
        s.step(&mut p, &[0.7, 0.7]).unwrap();
        assert!((before - p[0] - 0.01).abs() < 1e-6);
    }
    assert_eq!(s.step, 1000);
}

#[test]
fn polyak_closed_form() {
    let main = vec![1.0; 4];
    let mut target = vec![0.0; 4];
    let tau = 0.1;
    for k in 1..=30 {
        polyak_update(&main, &mut target, tau).unwrap();
        let expect = 1.0 - (1.0f64 - tau).powi(k);
        assert!(target.iter().all(|t| (t - expect).abs() < 1e-12));
    }
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let cfg = AgentConfig {
        hidden: vec![8, 8],
        ..AgentConfig::default()
    };
    let b = AgentBundle::new(11, 2, &cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ckpt");
    b.to_checkpoint().save(&path).unwrap();
    let back = AgentBundle::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back, b);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"RSTEERCK");
    let truncated = &bytes[..bytes.len() - 5];
    assert!(Checkpoint::from_bytes(truncated).is_err());
}
