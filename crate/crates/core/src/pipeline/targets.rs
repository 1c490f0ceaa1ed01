//! Derived training targets: normalised distance transform and boundaries.

use std::collections::VecDeque;

use crate::substrate::tensor::Tensor;

/// 1-D squared Euclidean distance transform of a sampled function (lower
/// envelope of parabolas). Infinite samples contribute no parabola; at least one
/// sample must be finite.
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let parabola = |q: usize| f[q] + (q * q) as f64;
    let mut k = 0usize;
    let mut started = false;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let mut s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    debug_assert!(started, "dt1d needs a finite sample");
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Squared distance from every foreground pixel to the nearest background pixel,
/// where everything outside the image counts as background.
pub fn squared_edt(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0.0; ph * pw];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                grid[(y + 1) * pw + x + 1] = f64::INFINITY;
            }
        }
    }
    let n = ph.max(pw);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        dt1d(&f[..ph], &mut d[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = d[y];
        }
    }
    for y in 0..ph {
        f[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        dt1d(&f[..pw], &mut d[..pw], &mut v, &mut z);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&d[..pw]);
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&grid[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
    }
    out
}

/// 4-connected component labels (0 = background, 1.. = components).
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    (labels, next)
}

fn binary(mask: &Tensor) -> (Vec<bool>, usize, usize) {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (mask.data().iter().map(|&v| v > 0.5).collect(), h, w)
}

/// Distance to background for changed pixels, divided by the maximum within
/// each 4-connected component.
pub fn gen_distance_gt(mask: &Tensor) -> Tensor {
    let (m, h, w) = binary(mask);
    let dist: Vec<f64> = squared_edt(&m, h, w).into_iter().map(f64::sqrt).collect();
    let (labels, n) = label_components(&m, h, w);
    let mut peak = vec![0.0f64; n + 1];
    for (l, d) in labels.iter().zip(&dist) {
        peak[*l] = peak[*l].max(*d);
    }
    let data = labels
        .iter()
        .zip(&dist)
        .map(|(&l, &d)| if l == 0 { 0.0 } else { d / peak[l] })
        .collect();
    Tensor::new(mask.shape().to_vec(), data).expect("same element count")
}

/// One 4-neighbourhood erosion; pixels outside the image count as 0.
fn erode(m: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize]
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            m[i] && at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)
        })
        .collect()
}

/// Inner boundary of width `width`: mask pixels removed by `width` erosions.
pub fn gen_boundary_gt(mask: &Tensor, width: usize) -> Tensor {
    let (m, h, w) = binary(mask);
    let mut eroded = m.clone();
    for _ in 0..width {
        eroded = erode(&eroded, h, w);
    }
    let data = m
        .iter()
        .zip(&eroded)
        .map(|(&a, &e)| if a && !e { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(mask.shape().to_vec(), data).expect("same element count")
}
