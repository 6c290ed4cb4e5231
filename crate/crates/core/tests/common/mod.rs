//! Brute-force oracles and input strategies shared by the integration tests.

use flowplan::datagen::FilterConfig;
use proptest::prelude::*;

/// Per-frame confirmed gripper state, then maximal runs, then repeated
/// "absorb the first short run" until every run is long enough.
pub fn segment_oracle(b: &[bool], persistence: usize, min_len: usize) -> Vec<(usize, usize, u8)> {
    let n = b.len();
    let mut label = vec![b[0]; n];
    for i in 1..n {
        let prev = label[i - 1];
        let starts_run = b[i] != b[i - 1] && b[i] != prev;
        let holds = i + persistence <= n && (i..i + persistence).all(|j| b[j] == b[i]);
        label[i] = if starts_run && holds { b[i] } else { prev };
    }
    let mut runs: Vec<(usize, usize, bool)> = Vec::new();
    for (i, &l) in label.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == l => r.1 = i,
            _ => runs.push((i, i, l)),
        }
    }
    while runs.len() > 1 {
        let Some(i) = runs.iter().position(|r| r.1 - r.0 + 1 < min_len) else {
            break;
        };
        if i > 0 {
            runs[i - 1].1 = runs[i].1;
        } else {
            runs[1].0 = runs[0].0;
        }
        runs.remove(i);
        let mut j = 1;
        while j < runs.len() {
            if runs[j].2 == runs[j - 1].2 {
                runs[j - 1].1 = runs[j].1;
                runs.remove(j);
            } else {
                j += 1;
            }
        }
    }
    runs.into_iter().map(|r| (r.0, r.1, r.2 as u8)).collect()
}

/// Exact rational evaluation for integer exponents:
/// `floor(s + k^g (e - s) / (K-1)^g)`.
pub fn resample_oracle(s: usize, e: usize, k: usize, gamma: u32) -> Vec<usize> {
    let den = ((k - 1) as u128).pow(gamma);
    (0..k)
        .map(|i| s + ((i as u128).pow(gamma) * (e - s) as u128 / den) as usize)
        .collect()
}

pub fn filter_oracle(tracks: &[Vec<[f64; 3]>], cfg: &FilterConfig) -> Vec<bool> {
    let n = tracks[0].len();
    let step = |t: usize, i: usize| {
        let (a, b) = (tracks[t][i], tracks[t + 1][i]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let path: Vec<f64> = (0..n)
        .map(|i| (0..tracks.len() - 1).map(|t| step(t, i)).sum())
        .collect();
    let jump: Vec<f64> = (0..n)
        .map(|i| {
            (0..tracks.len() - 1)
                .map(|t| step(t, i))
                .fold(0.0, f64::max)
        })
        .collect();
    let moving: Vec<usize> = (0..n)
        .filter(|&i| path[i] >= cfg.static_threshold)
        .collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let m = v.len();
        if m % 2 == 1 {
            v[m / 2]
        } else {
            (v[m / 2 - 1] + v[m / 2]) / 2.0
        }
    };
    let limit = if moving.is_empty() {
        f64::INFINITY
    } else {
        let med = median(moving.iter().map(|&i| path[i]).collect());
        let mad = median(moving.iter().map(|&i| (path[i] - med).abs()).collect());
        med + cfg.outlier_mad_k * mad
    };
    (0..n)
        .map(|i| path[i] >= cfg.static_threshold && path[i] <= limit && jump[i] <= cfg.delta_max)
        .collect()
}

pub fn bits() -> impl Strategy<Value = Vec<bool>> {
    // runs of random length give realistic gripper series with blips
    prop::collection::vec((any::<bool>(), 1usize..8), 1..12).prop_map(|runs| {
        runs.into_iter()
            .flat_map(|(v, n)| std::iter::repeat_n(v, n))
            .collect()
    })
}

pub fn tracks() -> impl Strategy<Value = Vec<Vec<[f64; 3]>>> {
    (2usize..=64, 1usize..=32).prop_flat_map(|(h, n)| {
        let pt = prop_oneof![
            3 => (-0.05f64..0.05, -0.05f64..0.05, -0.05f64..0.05).prop_map(|p| [p.0, p.1, p.2]),
            1 => Just([0.0; 3]),
            1 => (-0.3f64..0.3, -0.3f64..0.3, -0.3f64..0.3).prop_map(|p| [p.0, p.1, p.2]),
        ];
        prop::collection::vec(prop::collection::vec(pt, n), h - 1).prop_map(move |steps| {
            // integrate random steps into tracks
            let mut out = vec![vec![[0.5; 3]; n]];
            for s in steps {
                let last = out.last().unwrap().clone();
                out.push(
                    last.iter()
                        .zip(&s)
                        .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
                        .collect(),
                );
            }
            out
        })
    })
}
