//! Scalar abstraction and small fixed-size linear algebra helpers.
//!
//! All numeric kernels are generic over [`Real`] so the training path can run
//! at f32 while gradient-check tests instantiate the identical code at f64.

use num_traits::Float;

pub trait Real:
    Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Shorthand lossy conversion from f64.
    fn fr(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn to_f64_(self) -> f64 {
        self.to_f64().expect("to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type V3<T> = [T; 3];
pub type M3<T> = [[T; 3]; 3];

pub fn v3<T: Real>(x: f64, y: f64, z: f64) -> V3<T> {
    [T::fr(x), T::fr(y), T::fr(z)]
}

pub fn dot3<T: Real>(a: V3<T>, b: V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3<T: Real>(a: V3<T>) -> T {
    dot3(a, a).sqrt()
}

pub fn scale3<T: Real>(a: V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn add3<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn normalize3<T: Real>(a: V3<T>) -> V3<T> {
    let n = norm3(a);
    scale3(a, T::one() / n)
}

pub fn mat3_mul_v3<T: Real>(m: &M3<T>, v: V3<T>) -> V3<T> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat3_det<T: Real>(m: &M3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat3_inverse<T: Real>(m: &M3<T>) -> Option<M3<T>> {
    let det = mat3_det(m);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let inv_det = T::one() / det;
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            // cofactor transpose
            out[j][i] = (m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1]) * inv_det;
        }
    }
    Some(out)
}

/// Eigenvalues of a symmetric 3x3 matrix, ascending, via the trigonometric
/// closed form (Smith's algorithm).
pub fn sym3_eigenvalues<T: Real>(m: &M3<T>) -> [T; 3] {
    let one = T::one();
    let two = T::fr(2.0);
    let three = T::fr(3.0);
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let q = (m[0][0] + m[1][1] + m[2][2]) / three;
    if p1 == T::zero() {
        let mut e = [m[0][0], m[1][1], m[2][2]];
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return e;
    }
    let d0 = m[0][0] - q;
    let d1 = m[1][1] - q;
    let d2 = m[2][2] - q;
    let p2 = d0 * d0 + d1 * d1 + d2 * d2 + two * p1;
    let p = (p2 / T::fr(6.0)).sqrt();
    let inv_p = one / p;
    // B = (1/p)(M - qI)
    let mut b = *m;
    b[0][0] = d0 * inv_p;
    b[1][1] = d1 * inv_p;
    b[2][2] = d2 * inv_p;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                b[i][j] = b[i][j] * inv_p;
            }
        }
    }
    let r = mat3_det(&b) / two;
    let r = r.max(-one).min(one);
    let phi = r.acos() / three;
    let two_pi_3 = T::fr(2.0 * std::f64::consts::PI / 3.0);
    let e0 = q + two * p * phi.cos();
    let e2 = q + two * p * (phi + two_pi_3).cos();
    let e1 = three * q - e0 - e2;
    let mut e = [e0, e1, e2];
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

/// Unit eigenvector for the given eigenvalue of a symmetric 3x3 matrix,
/// via the largest cross product of rows of (M - lambda I).
pub fn sym3_eigenvector<T: Real>(m: &M3<T>, lambda: T) -> Option<V3<T>> {
    let mut b = *m;
    for i in 0..3 {
        b[i][i] = b[i][i] - lambda;
    }
    let c01 = cross3(b[0], b[1]);
    let c02 = cross3(b[0], b[2]);
    let c12 = cross3(b[1], b[2]);
    let (n01, n02, n12) = (dot3(c01, c01), dot3(c02, c02), dot3(c12, c12));
    let (best, best_n) = if n01 >= n02 && n01 >= n12 {
        (c01, n01)
    } else if n02 >= n12 {
        (c02, n02)
    } else {
        (c12, n12)
    };
    if best_n <= T::zero() || !best_n.is_finite() {
        return None;
    }
    Some(normalize3(best))
}

/// Deterministic stream-splitting hash (splitmix64 over mixed inputs).
/// Used to derive independent RNG seeds per (seed, iteration, purpose, index).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        // splitmix64 finalizer
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
