use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttsnn::tensor::{contract_mode1, singular_values, DenseTensor};
use ttsnn::vbmf::{energy_rank, estimate_layer_rank, evbmf_rank, RankMethod, RankPolicy, Unfolding};

fn planted(l: usize, m: usize, rank: usize, noise: f64, seed: u64) -> DenseTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DenseTensor::<f64>::randn(&[l, rank], 1.0, &mut rng);
    let b = DenseTensor::<f64>::randn(&[rank, m], 1.0, &mut rng);
    let e = DenseTensor::<f64>::randn(&[l, m], noise, &mut rng);
    contract_mode1(&a, &b).unwrap().add(&e).unwrap()
}

#[test]
fn planted_rank_five_recovered() {
    let mut hits = 0;
    for seed in 0..20 {
        let y = planted(100, 80, 5, 0.1, seed);
        let s = singular_values(&y).unwrap();
        // factor-to-noise singular value ratio
        assert!(s[4] / s[5] >= 10.0, "seed {seed}: ratio {}", s[4] / s[5]);
        let est = evbmf_rank(&y).unwrap();
        assert_eq!(est.method, RankMethod::Evbmf);
        if est.rank == 5 {
            hits += 1;
        }
    }
    assert!(hits >= 19, "recovered rank 5 in {hits}/20 trials");
}

#[test]
fn noise_variance_estimate_is_close() {
    let y = planted(100, 80, 5, 0.1, 77);
    let est = evbmf_rank(&y).unwrap();
    assert!((est.sigma2 / 0.01 - 1.0).abs() < 0.3, "sigma2 = {}", est.sigma2);
    assert!(est.retained.iter().all(|&v| v > 0.0));
    assert_eq!(est.retained.len(), est.rank);
}

#[test]
fn zero_matrix_has_rank_zero() {
    let est = evbmf_rank(&DenseTensor::<f64>::zeros(&[10, 10])).unwrap();
    assert_eq!(est.rank, 0);
}

#[test]
fn rank_never_increases_along_noise_ladder() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = DenseTensor::<f64>::randn(&[60, 4], 1.0, &mut rng);
        let b = DenseTensor::<f64>::randn(&[4, 50], 1.0, &mut rng);
        let signal = contract_mode1(&a, &b).unwrap();
        let e = DenseTensor::<f64>::randn(&[60, 50], 1.0, &mut rng);
        let mut prev = usize::MAX;
        for sigma in [0.05, 0.2, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0] {
            let r = evbmf_rank(&signal.add(&e.scale(sigma)).unwrap()).unwrap().rank;
            assert!(r <= prev, "seed {seed}: rank rose to {r} at sigma {sigma}");
            prev = r;
        }
        assert_eq!(prev, 0, "heavy noise should swamp the signal");
    }
}

#[test]
fn rank_is_scale_invariant() {
    for seed in 0..5 {
        let y = planted(40, 30, 3, 0.5, 200 + seed);
        let r = evbmf_rank(&y).unwrap().rank;
        for c in [0.1, 10.0] {
            assert_eq!(evbmf_rank(&y.scale(c)).unwrap().rank, r);
        }
    }
}

#[test]
fn transposed_input_same_rank() {
    let y = planted(30, 70, 4, 0.2, 5);
    let yt = DenseTensor::from_fn(&[70, 30], |ix| y.get(&[ix[1], ix[0]]));
    assert_eq!(evbmf_rank(&y).unwrap().rank, evbmf_rank(&yt).unwrap().rank);
}

#[test]
fn rank_one_kernel_gives_rank_one() {
    let (o, i, k) = (6, 5, 3);
    let u = [0.3, -1.0, 2.0, 0.5, 1.5];
    let v = [1.0, 0.5, -0.25, 2.0, 1.0, -1.0];
    let sp = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]];
    let w = DenseTensor::<f32>::from_fn(&[o, i, k, k], |ix| (v[ix[0]] * u[ix[1]] * sp[ix[2]][ix[3]]) as f32);
    let r = estimate_layer_rank(&w, &RankPolicy::Vbmf { unfolding: Unfolding::Middle }, 0).unwrap();
    assert_eq!(r.rank, 1);
}

#[test]
fn energy_policy_matches_cumulative_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = DenseTensor::<f32>::randn(&[8, 6, 3, 3], 1.0, &mut rng);
    let r = estimate_layer_rank(&w, &RankPolicy::EnergyThreshold { energy: 0.95, unfolding: Unfolding::Middle }, 0)
        .unwrap();
    let s = singular_values(&Unfolding::Middle.apply(&w).unwrap()).unwrap();
    let total: f64 = s.iter().map(|v| v * v).sum();
    let mut acc = 0.0;
    let mut expected = 0;
    for (j, v) in s.iter().enumerate() {
        acc += v * v;
        if acc >= 0.95 * total {
            expected = j + 1;
            break;
        }
    }
    assert_eq!(r.rank, expected);
    assert_eq!(r.rank, energy_rank(&s, 0.95));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn rank_bounded_by_min_dim(l in 1usize..12, m in 1usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DenseTensor::<f64>::randn(&[l, m], 1.0, &mut rng);
        let est = evbmf_rank(&y).unwrap();
        prop_assert!(est.rank <= l.min(m));
        let w = DenseTensor::<f32>::randn(&[l, m, 3, 3], 1.0, &mut rng);
        let r = estimate_layer_rank(&w, &RankPolicy::Vbmf { unfolding: Unfolding::Middle }, 0).unwrap();
        prop_assert!(r.rank >= 1 && r.rank <= (m * 3).min(3 * l));
    }
}
