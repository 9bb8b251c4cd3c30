use slpt_core::diffcore::{Tape, Tensor};
use slpt_core::plvae::{reparameterize, Posterior, SampleMode};

fn posterior(tape: &mut Tape<f64>, mu: &Tensor<f64>, logvar: &Tensor<f64>) -> Posterior {
    let (mu_f, logvar_f) = (tape.input(mu.clone()), tape.input(logvar.clone()));
    let (mu_p, logvar_p) = (tape.input(mu.clone()), tape.input(logvar.clone()));
    let global = tape.constant(Tensor::zeros(&[1, 1]));
    Posterior {
        mu_f,
        logvar_f,
        mu_p,
        logvar_p,
        global,
    }
}

#[test]
fn reparameterized_samples_have_posterior_moments() {
    // every row shares one (μ, log σ²), so each column holds 10⁵ draws
    let n = 100_000;
    let params = [(0.5, 0.0), (-1.0, -2.0), (2.0, 1.0)];
    let mu = Tensor::from_fn(&[n, 3], |i| params[i % 3].0);
    let logvar = Tensor::from_fn(&[n, 3], |i| params[i % 3].1);
    let mut tape = Tape::new();
    let post = posterior(&mut tape, &mu, &logvar);
    let z = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 2024 }).unwrap();
    for var in [z.z_f, z.z_p] {
        let z = tape.value(var);
        for (c, &(m, lv)) in params.iter().enumerate() {
            let sigma2: f64 = f64::exp(lv);
            let col: Vec<f64> = (0..n).map(|i| z.row(i)[c]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((mean - m).abs() < 3.0 * sigma2.sqrt() / (n as f64).sqrt(), "mean {mean} vs {m}");
            assert!((var - sigma2).abs() < 0.05 * sigma2, "variance {var} vs {sigma2}");
        }
    }
}

#[test]
fn floor_log_variance_keeps_samples_near_the_mean() {
    let mu = Tensor::from_fn(&[500, 3], |i| i as f64 * 0.01);
    let logvar = Tensor::full(&[500, 3], -10.0);
    let mut tape = Tape::new();
    let post = posterior(&mut tape, &mu, &logvar);
    let z = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 3 }).unwrap();
    let sigma = f64::exp(-5.0);
    for ((zv, m), e) in tape.value(z.z_p).data().iter().zip(mu.data()).zip(z.eps_p.data()) {
        assert!((zv - m).abs() <= sigma * e.abs() * (1.0 + 1e-12) + 1e-15);
    }
}

#[test]
fn feature_and_coordinate_noise_are_independent_draws() {
    let mu = Tensor::zeros(&[3, 2]);
    let logvar = Tensor::zeros(&[3, 2]);
    let mut tape = Tape::new();
    let post = posterior(&mut tape, &mu, &logvar);
    let z = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 11 }).unwrap();
    assert_ne!(z.eps_f, z.eps_p);
    assert_eq!(tape.value(z.z_f), &z.eps_f);
    assert_eq!(tape.value(z.z_p), &z.eps_p);
}
