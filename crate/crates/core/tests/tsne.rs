use digitvox::metrics::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn clusters(seed: u64, k: usize, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| 6.0 * unit.sample(&mut rng)).collect()).collect();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            x.push(centre.iter().map(|m| m + unit.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    (x, labels)
}

#[test]
fn clusters_stay_separated_and_kl_descends() {
    let (x, labels) = clusters(3, 4, 15, 10);
    let cfg = TsneConfig {
        perplexity: 10.0,
        seed: 4,
        ..Default::default()
    };
    let res = tsne_project(&x, &cfg).unwrap();
    assert_eq!(res.coords.len(), x.len());
    assert!(res.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
    assert_eq!(res.kl.len(), cfg.iterations);
    for w in res.kl[cfg.exaggeration_iters..].windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
    }
    let (mut intra, mut inter) = ((0.0, 0), (0.0, 0));
    for i in 0..x.len() {
        for j in 0..i {
            let d = ((res.coords[i][0] - res.coords[j][0]).powi(2) + (res.coords[i][1] - res.coords[j][1]).powi(2)).sqrt();
            let acc = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            acc.0 += d;
            acc.1 += 1;
        }
    }
    assert!(intra.0 / (intra.1 as f64) < inter.0 / (inter.1 as f64));
    // Same seed, same layout.
    assert_eq!(tsne_project(&x, &cfg).unwrap(), res);
}
