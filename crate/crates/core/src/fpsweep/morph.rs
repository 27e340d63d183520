//! Binary morphology with a discrete-disc structuring element.
//!
//! The element of diameter `k` is the set of cells `(i, j)` of a `k × k`
//! grid with `(i + ½ − k/2)² + (j + ½ − k/2)² ≤ (k/2)²`, anchored at
//! `(⌊k/2⌋, ⌊k/2⌋)`. Erosion is `⋂_b X − b`, dilation is `⋃_b X + b`
//! (the reflected element), and pixels outside the image are background.
//!
//! Both operators reduce to thresholding a squared Euclidean distance
//! transform. For odd `k` the element is symmetric about the anchor; for
//! even `k` it is centred on `(−½, −½)`, so the transform is evaluated at
//! half-pixel shifted query positions.

use ndarray::Array2;

use crate::dataio::Mask;

/// Offsets `(dx, dy)` of the structuring element relative to its anchor.
pub fn structuring_element(k: usize) -> Vec<(isize, isize)> {
    let half = k as f64 / 2.0;
    let anchor = (k / 2) as isize;
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let (u, v) = (i as f64 + 0.5 - half, j as f64 + 0.5 - half);
            if u * u + v * v <= half * half {
                out.push((j as isize - anchor, i as isize - anchor));
            }
        }
    }
    out
}

/// `d[i] = min_q (i − shift − q)² + f[q]` by the lower envelope of parabolas.
fn envelope_1d(f: &[f64], shift: f64, d: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().expect("boundary per site") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    z.clear();
                }
                continue;
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    if v.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, out) in d.iter_mut().enumerate() {
        let x = i as f64 - shift;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let dx = x - v[k] as f64;
        *out = dx * dx + f[v[k]];
    }
}

/// Squared distance from each query position `(x − shift, y − shift)` to
/// the nearest pixel where `site` is true. Infinite when there is none.
fn squared_distance(site: &Array2<bool>, shift: f64) -> Array2<f64> {
    let (h, w) = site.dim();
    let mut cols = Array2::<f64>::zeros((h, w));
    let mut f = vec![0.0; h];
    let mut d = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if site[[y, x]] { 0.0 } else { f64::INFINITY };
        }
        envelope_1d(&f, shift, &mut d);
        for y in 0..h {
            cols[[y, x]] = d[y];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    let mut f = vec![0.0; w];
    let mut d = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            f[x] = cols[[y, x]];
        }
        envelope_1d(&f, shift, &mut d);
        for x in 0..w {
            out[[y, x]] = d[x];
        }
    }
    out
}

fn radius_sq(k: usize) -> f64 {
    (k as f64 / 2.0).powi(2)
}

/// Erosion on the given canvas; pixels beyond it count as background.
pub fn erode(mask: &Mask, k: usize) -> Mask {
    let (h, w) = mask.dim();
    // Pad by one so the outside is represented by real background sites.
    let mut bg = Array2::from_elem((h + 2, w + 2), true);
    for ((y, x), &m) in mask.indexed_iter() {
        bg[[y + 1, x + 1]] = !m;
    }
    let shift = if k % 2 == 0 { 0.5 } else { 0.0 };
    let d = squared_distance(&bg, shift);
    let r2 = radius_sq(k);
    Array2::from_shape_fn((h, w), |(y, x)| mask[[y, x]] && d[[y + 1, x + 1]] > r2)
}

/// Dilation by the reflected element.
pub fn dilate(mask: &Mask, k: usize) -> Mask {
    let shift = if k % 2 == 0 { -0.5 } else { 0.0 };
    let d = squared_distance(mask, shift);
    let r2 = radius_sq(k);
    d.mapv(|v| v <= r2)
}

fn pad(mask: &Mask, p: usize) -> Mask {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h + 2 * p, w + 2 * p), false);
    out.slice_mut(ndarray::s![p..p + h, p..p + w]).assign(mask);
    out
}

fn crop(mask: &Mask, p: usize, h: usize, w: usize) -> Mask {
    mask.slice(ndarray::s![p..p + h, p..p + w]).to_owned()
}

/// Opening (erode, then dilate) computed as on the unbounded plane.
pub fn open(mask: &Mask, k: usize) -> Mask {
    let (h, w) = mask.dim();
    let p = k + 1;
    crop(&dilate(&erode(&pad(mask, p), k), k), p, h, w)
}

/// Closing (dilate, then erode) computed as on the unbounded plane.
pub fn close(mask: &Mask, k: usize) -> Mask {
    let (h, w) = mask.dim();
    let p = k + 1;
    crop(&erode(&dilate(&pad(mask, p), k), k), p, h, w)
}

/// Opening followed by closing with the same element of diameter `k`.
pub fn morph_open_close(mask: &Mask, k: usize) -> Mask {
    if k <= 1 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let p = 2 * k + 2;
    let padded = pad(mask, p);
    let opened = dilate(&erode(&padded, k), k);
    let closed = erode(&dilate(&opened, k), k);
    crop(&closed, p, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_shapes() {
        assert_eq!(structuring_element(1), vec![(0, 0)]);
        assert_eq!(structuring_element(2).len(), 4);
        // 3×3 disc of radius 1.5: every cell centre is within 1.5 of the middle.
        assert_eq!(structuring_element(3).len(), 9);
        // Radius 2.5 excludes the four corners of the 5×5 grid.
        assert_eq!(structuring_element(5).len(), 21);
        let e4 = structuring_element(4);
        assert_eq!(e4.len(), 12);
        assert!(e4.contains(&(-2, -1)) && e4.contains(&(1, 0)) && !e4.contains(&(-2, -2)));
    }

    #[test]
    fn envelope_matches_brute_force() {
        let f = [f64::INFINITY, 3.0, f64::INFINITY, 0.0, 7.0, f64::INFINITY];
        for shift in [0.0, 0.5, -0.5] {
            let mut d = vec![0.0; f.len()];
            envelope_1d(&f, shift, &mut d);
            for (i, &di) in d.iter().enumerate() {
                let x = i as f64 - shift;
                let want = f
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(q, v)| (x - q as f64).powi(2) + v)
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(di, want);
            }
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let m = Array2::from_shape_fn((9, 9), |(y, x)| (x * 7 + y * 3) % 5 == 0);
        assert_eq!(morph_open_close(&m, 1), m);
        assert_eq!(erode(&m, 1), m);
        assert_eq!(dilate(&m, 1), m);
    }
}
