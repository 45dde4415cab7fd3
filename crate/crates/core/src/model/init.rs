use rand::Rng;
use rand_distr::StandardNormal;

/// Random matrix with orthonormal rows (`rows ≤ cols`) or columns
/// (`rows > cols`), row-major.
///
/// A Gaussian matrix is factored with Householder QR and the columns of `Q`
/// are sign-corrected by `sign(R_jj)`, which makes the result Haar
/// distributed.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f32> {
    assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
    let (m, n) = (rows.max(cols), rows.min(cols));
    // column-major m×n
    let mut a: Vec<f64> = (0..m * n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let q = thin_q(&mut a, m, n);
    let mut out = vec![0.0f32; rows * cols];
    for j in 0..n {
        for i in 0..m {
            let v = q[j * m + i] as f32;
            if rows >= cols {
                out[i * cols + j] = v;
            } else {
                out[j * cols + i] = v;
            }
        }
    }
    out
}

/// Householder QR of a column-major `m×n` matrix (`m ≥ n`); returns the
/// sign-corrected thin `Q`, column-major.
fn thin_q(a: &mut [f64], m: usize, n: usize) -> Vec<f64> {
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_sign = vec![1.0f64; n];
    for j in 0..n {
        let col = &a[j * m + j..(j + 1) * m];
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if col[0] >= 0.0 { -norm } else { norm };
        let mut v = col.to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        // R_jj = alpha
        diag_sign[j] = if alpha < 0.0 { -1.0 } else { 1.0 };
        if vnorm2 > 0.0 {
            for k in j..n {
                let c = &mut a[k * m + j..(k + 1) * m];
                let dot: f64 = v.iter().zip(c.iter()).map(|(x, y)| x * y).sum();
                let f = 2.0 * dot / vnorm2;
                for (ci, vi) in c.iter_mut().zip(&v) {
                    *ci -= f * vi;
                }
            }
        }
        reflectors.push(v);
    }
    // Q = H_0 H_1 … H_{n−1} applied to the first n identity columns
    let mut q = vec![0.0f64; m * n];
    for j in 0..n {
        q[j * m + j] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &reflectors[j];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for k in 0..n {
            let c = &mut q[k * m + j..(k + 1) * m];
            let dot: f64 = v.iter().zip(c.iter()).map(|(x, y)| x * y).sum();
            if dot == 0.0 {
                continue;
            }
            let f = 2.0 * dot / vnorm2;
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci -= f * vi;
            }
        }
    }
    for (j, s) in diag_sign.iter().enumerate() {
        if *s < 0.0 {
            for x in &mut q[j * m..(j + 1) * m] {
                *x = -*x;
            }
        }
    }
    q
}

/// He-normal weights with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_normal<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect()
}
