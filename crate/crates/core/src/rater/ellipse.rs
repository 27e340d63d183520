//! Least-squares ellipse fitting to boundary points.

use nalgebra::{Matrix2, Matrix3, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    /// Full axis lengths, `major ≥ minor`.
    pub major: f64,
    pub minor: f64,
    /// Angle of the major axis from the +x direction, radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn eccentricity(&self) -> f64 {
        if self.major <= 0.0 {
            return 0.0;
        }
        (1.0 - (self.minor / self.major).powi(2)).max(0.0).sqrt()
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * (self.major / 2.0) * (self.minor / 2.0)
    }
}

/// Direct ellipse-specific least squares (the numerically stable
/// partitioned form of the constrained conic fit). Points are centred and
/// scaled first. Returns `None` when the points admit no ellipse.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Option<Ellipse> {
    if points.len() < 5 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let scale = (points
        .iter()
        .map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if scale <= 0.0 || !scale.is_finite() {
        return None;
    }
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in points {
        let (x, y) = ((px - mx) / scale, (py - my) / scale);
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let t = -s3.try_inverse()? * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]].
    let mc = Matrix3::from_rows(&[m.row(2) / 2.0, -m.row(1), m.row(0) / 2.0]);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in mc.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * lambda.re.abs().max(1.0) {
            continue;
        }
        let shifted = mc - Matrix3::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        let v: Vector3<f64> = v_t.row(idx).transpose();
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 && best.as_ref().is_none_or(|(c, _)| cond > *c) {
            best = Some((cond, v));
        }
    }
    let (_, a1) = best?;
    let a2 = t * a1;
    let g = conic_to_ellipse([a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]])?;
    Some(Ellipse {
        center_x: g.center_x * scale + mx,
        center_y: g.center_y * scale + my,
        major: g.major * scale,
        minor: g.minor * scale,
        angle: g.angle,
    })
}

/// Geometry of `A x² + B xy + C y² + D x + E y + F = 0` when it is a real ellipse.
pub fn conic_to_ellipse(c: [f64; 6]) -> Option<Ellipse> {
    let [a, b, cc, d, e, f] = c;
    let q = Matrix2::new(2.0 * a, b, b, 2.0 * cc);
    let center = q.try_inverse()? * nalgebra::Vector2::new(-d, -e);
    let (x0, y0) = (center[0], center[1]);
    let f0 = f + (d * x0 + e * y0) / 2.0;
    let form = nalgebra::Matrix2::new(a, b / 2.0, b / 2.0, cc).symmetric_eigen();
    let (l1, l2) = (form.eigenvalues[0], form.eigenvalues[1]);
    let (s1, s2) = (-f0 / l1, -f0 / l2);
    if !(s1 > 0.0 && s2 > 0.0 && s1.is_finite() && s2.is_finite()) {
        return None;
    }
    let (r1, r2) = (s1.sqrt(), s2.sqrt());
    // The larger semi-axis lies along the eigenvector of the smaller |eigenvalue|.
    let (major, minor, k) = if r1 >= r2 { (r1, r2, 0) } else { (r2, r1, 1) };
    let dir = form.eigenvectors.column(k);
    Some(Ellipse {
        center_x: x0,
        center_y: y0,
        major: 2.0 * major,
        minor: 2.0 * minor,
        angle: dir[1].atan2(dir[0]),
    })
}

/// Ellipse with the same second moments as a pixel set, each pixel treated
/// as a unit square.
pub fn moment_ellipse(pixels: &[(usize, usize)]) -> Ellipse {
    let n = pixels.len().max(1) as f64;
    let mx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (1.0 / 12.0, 1.0 / 12.0, 0.0);
    for &(x, y) in pixels {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx / n;
        syy += dy * dy / n;
        sxy += dx * dy / n;
    }
    let eig = Matrix2::new(sxx, sxy, sxy, syy).symmetric_eigen();
    let (l1, l2) = (eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0));
    let (big, small, k) = if l1 >= l2 { (l1, l2, 0) } else { (l2, l1, 1) };
    let dir = eig.eigenvectors.column(k);
    Ellipse {
        center_x: mx,
        center_y: my,
        major: 4.0 * big.sqrt(),
        minor: 4.0 * small.sqrt(),
        angle: dir[1].atan2(dir[0]),
    }
}
