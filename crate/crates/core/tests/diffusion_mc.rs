use rand::Rng as _;

use ptdr::diffusion::{generate, iterated_forward, q_sample, DiffusionSchedule, NoisePredictor};
use ptdr::rng::{derive, normal, seeded};
use ptdr::{Result, Tensor};

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn closed_form_matches_iterated_chain_at_random_timesteps() {
    let draws = 10_000;
    let sched = DiffusionSchedule::linear_default(100).unwrap();
    let x0 = Tensor::from_vec(&[1], vec![0.6f64]).unwrap();
    let mut pick = seeded(40);
    for _ in 0..4 {
        let t = pick.random_range(1..=100);
        let (mut a, mut b) = (Vec::with_capacity(draws), Vec::with_capacity(draws));
        let (mut ra, mut rb) = (derive(41, t as u64), derive(42, t as u64));
        for _ in 0..draws {
            let eps: Tensor<f64> = normal(&[1], &mut ra);
            a.push(q_sample(&x0, t, &eps, &sched).unwrap().data()[0]);
            b.push(iterated_forward(&x0, t, &sched, &mut rb).unwrap().data()[0]);
        }
        let ab = sched.alpha_bar(t).unwrap();
        let n = draws as f64;
        for v in [&a, &b] {
            let (m, var) = stats(v);
            assert!((m - ab.sqrt() * 0.6).abs() < 3.0 * ((1.0 - ab) / n).sqrt(), "t={t} mean {m}");
            let se = (1.0 - ab) * (2.0 / (n - 1.0)).sqrt();
            assert!((var - (1.0 - ab)).abs() < 3.0 * se, "t={t} var {var}");
        }
    }
}

struct Zero;

impl NoisePredictor<f64> for Zero {
    fn predict(&self, x: &Tensor<f64>, _t: &[usize]) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(x.shape()))
    }
}

#[test]
fn sampling_is_seeded_and_shaped() {
    let sched = DiffusionSchedule::linear_default(20).unwrap();
    let a = generate(&Zero, &sched, &[2, 1, 4, 4], &mut seeded(5)).unwrap();
    let b = generate(&Zero, &sched, &[2, 1, 4, 4], &mut seeded(5)).unwrap();
    let c = generate(&Zero, &sched, &[2, 1, 4, 4], &mut seeded(6)).unwrap();
    assert_eq!(a.shape(), &[2, 1, 4, 4]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.is_finite());
}
