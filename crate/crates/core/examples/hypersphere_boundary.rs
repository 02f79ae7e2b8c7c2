// Radius moving average and boundary-inclusive classification against
// brute-force oracles.

use gsat::hypersphere::{classify, update_radius, Hypersphere};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default)]
pub struct SphereReport {
    /// Largest deviation from `eps * r + (1 - eps) * mean`, in ulps.
    pub radius_max_ulps: u64,
    /// Failures of the `eps = 0` / `eps = 1` endpoints to return exactly the
    /// mean distance / previous radius.
    pub endpoint_failures: usize,
    pub latents: usize,
    pub mismatches: usize,
    /// Latents placed exactly on the boundary, all of which must be normal.
    pub on_boundary: usize,
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

pub fn run_example() -> SphereReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rep = SphereReport::default();

    for k in 0..1000 {
        let eps = match k % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..=1.0),
        };
        let r: f64 = rng.gen_range(0.0..10.0);
        let d_bar: f64 = rng.gen_range(0.0..10.0);
        let got = update_radius(r, &[d_bar], eps).unwrap();
        let want = eps * r + (1.0 - eps) * d_bar;
        rep.radius_max_ulps = rep.radius_max_ulps.max(ulps(got, want));
        if (eps == 0.0 && got != d_bar) || (eps == 1.0 && got != r) {
            rep.endpoint_failures += 1;
        }
    }

    let dim = 8;
    let center: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3..=3) as f64).collect();
    let sphere = Hypersphere::new(center.clone(), 5.0, 0.5, 5).unwrap();
    let mut latents = Vec::new();
    let mut boundary_rows = Vec::new();
    for i in 0..10_000 {
        if i % 50 == 0 {
            // (3, 4) and (0, 5) offsets land exactly on radius 5
            let mut z = center.clone();
            let (a, b) = (rng.gen_range(0..dim), rng.gen_range(0..dim));
            if a == b {
                z[a] += 5.0;
            } else {
                z[a] += 3.0;
                z[b] -= 4.0;
            }
            boundary_rows.push(i);
            latents.extend(z);
        } else {
            latents.extend(center.iter().map(|c| c + rng.gen_range(-4.0..4.0)));
        }
    }
    let part = classify(&latents, &sphere);
    let mut normal = vec![false; 10_000];
    part.normal.iter().for_each(|&i| normal[i] = true);
    for (i, row) in latents.chunks(dim).enumerate() {
        let mut s = 0.0;
        for c in 0..dim {
            s += (row[c] - center[c]).powi(2);
        }
        if (s <= 25.0) != normal[i] {
            rep.mismatches += 1;
        }
    }
    rep.latents = 10_000;
    rep.on_boundary = boundary_rows.iter().filter(|&&i| normal[i]).count();
    assert_eq!(part.len(), 10_000);
    println!("{rep:?} ({} boundary latents placed)", boundary_rows.len());
    rep
}

#[allow(dead_code)]
fn main() {
    run_example();
}
