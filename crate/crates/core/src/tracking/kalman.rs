//! Constant-velocity Kalman filter over `(cx, cy, w, h)` and their rates.
//!
//! The filter runs in normalized units: boxes are divided by the scale of the
//! box the filter was initialized with, so the noise levels do not depend on
//! target size.

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const DIM: usize = 8;
pub const MEAS: usize = 4;

pub type Mat8 = [[f64; DIM]; DIM];
pub type Vec8 = [f64; DIM];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanConfig {
    /// Process noise for position and size.
    pub q_pos: f64,
    /// Process noise for the velocities.
    pub q_vel: f64,
    /// Measurement noise.
    pub r: f64,
    /// Initial covariance diagonal.
    pub p0: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            q_pos: 1e-2,
            q_vel: 1e-4,
            r: 0.1,
            p0: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub mean: Vec8,
    pub cov: Mat8,
    pub q: Mat8,
    pub r: [[f64; MEAS]; MEAS],
    /// Pixels per filter unit.
    pub scale: f64,
}

fn diag<const N: usize>(v: [f64; N]) -> [[f64; N]; N] {
    let mut m = [[0.0; N]; N];
    for i in 0..N {
        m[i][i] = v[i];
    }
    m
}

impl KalmanState {
    /// Filter in raw units with the given noise settings.
    pub fn new(mean: Vec8, cfg: &KalmanConfig) -> Self {
        let mut q = [cfg.q_pos; DIM];
        q[MEAS..].fill(cfg.q_vel);
        Self {
            mean,
            cov: diag([cfg.p0; DIM]),
            q: diag(q),
            r: diag([cfg.r; MEAS]),
            scale: 1.0,
        }
    }

    /// Starts at `b` with zero velocity, normalized by `√(w·h)`.
    pub fn from_box(b: &BBox, cfg: &KalmanConfig) -> Result<Self> {
        b.validate()?;
        let scale = (b.w * b.h).sqrt();
        let mut s = Self::new([0.0; DIM], cfg);
        s.scale = scale;
        let z = s.measurement(b);
        s.mean[..MEAS].copy_from_slice(&z);
        Ok(s)
    }

    fn measurement(&self, b: &BBox) -> [f64; MEAS] {
        let (cx, cy) = b.center();
        [cx, cy, b.w, b.h].map(|v| v / self.scale)
    }

    /// The box of the current mean, in pixels.
    pub fn to_box(&self) -> BBox {
        let m = self.mean.map(|v| v * self.scale);
        BBox::from_center(m[0], m[1], m[2], m[3])
    }

    /// `x' = F x`, `P' = F P Fᵀ + Q` with unit time step.
    pub fn predict(&self) -> (Vec8, Mat8) {
        let mut x = self.mean;
        for i in 0..MEAS {
            x[i] += self.mean[i + MEAS];
        }
        // F P Fᵀ where F = [[I, I], [0, I]]
        let p = &self.cov;
        let mut fp = *p;
        for i in 0..MEAS {
            for j in 0..DIM {
                fp[i][j] += p[i + MEAS][j];
            }
        }
        let mut out = fp;
        for i in 0..DIM {
            for j in 0..MEAS {
                out[i][j] += fp[i][j + MEAS];
            }
        }
        for i in 0..DIM {
            for j in 0..DIM {
                out[i][j] += self.q[i][j];
            }
        }
        (x, out)
    }

    pub fn predict_in_place(&mut self) {
        let (x, p) = self.predict();
        self.mean = x;
        self.cov = p;
    }

    /// Measurement update with `H = [I₄ | 0]`, Joseph-form covariance.
    pub fn update(&mut self, b: &BBox) -> Result<()> {
        b.validate()?;
        let z = self.measurement(b);
        let p = self.cov;
        // S = H P Hᵀ + R
        let mut s = [[0.0; MEAS]; MEAS];
        for i in 0..MEAS {
            for j in 0..MEAS {
                s[i][j] = p[i][j] + self.r[i][j];
            }
        }
        let s_inv = invert4(&s)?;
        // K = P Hᵀ S⁻¹ (8×4)
        let mut k = [[0.0; MEAS]; DIM];
        for i in 0..DIM {
            for j in 0..MEAS {
                k[i][j] = (0..MEAS).map(|m| p[i][m] * s_inv[m][j]).sum();
            }
        }
        let y: [f64; MEAS] = std::array::from_fn(|i| z[i] - self.mean[i]);
        for i in 0..DIM {
            self.mean[i] += (0..MEAS).map(|j| k[i][j] * y[j]).sum::<f64>();
        }
        // (I − KH) P (I − KH)ᵀ + K R Kᵀ
        let mut a = [[0.0; DIM]; DIM];
        for i in 0..DIM {
            a[i][i] = 1.0;
            for j in 0..MEAS {
                a[i][j] -= k[i][j];
            }
        }
        let ap = matmul8(&a, &p);
        let mut next = [[0.0; DIM]; DIM];
        for i in 0..DIM {
            for j in 0..DIM {
                let apa: f64 = (0..DIM).map(|m| ap[i][m] * a[j][m]).sum();
                let mut krk = 0.0;
                for m in 0..MEAS {
                    for n in 0..MEAS {
                        krk += k[i][m] * self.r[m][n] * k[j][n];
                    }
                }
                next[i][j] = apa + krk;
            }
        }
        // remove rounding asymmetry
        for i in 0..DIM {
            for j in 0..i {
                let v = 0.5 * (next[i][j] + next[j][i]);
                next[i][j] = v;
                next[j][i] = v;
            }
        }
        self.cov = next;
        Ok(())
    }
}

fn matmul8(a: &Mat8, b: &Mat8) -> Mat8 {
    let mut c = [[0.0; DIM]; DIM];
    for i in 0..DIM {
        for m in 0..DIM {
            let v = a[i][m];
            for j in 0..DIM {
                c[i][j] += v * b[m][j];
            }
        }
    }
    c
}

/// Gauss–Jordan inverse with partial pivoting.
fn invert4(s: &[[f64; MEAS]; MEAS]) -> Result<[[f64; MEAS]; MEAS]> {
    let mut a = *s;
    let mut inv = diag([1.0; MEAS]);
    let norm = s.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..MEAS {
        let piv = (col..MEAS)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if !(a[piv][col].abs() > 1e-300 && a[piv][col].abs() > norm * 1e-15) {
            return Err(Error::Numeric {
                op: "kf_update",
                detail: format!("innovation covariance is singular (pivot {:e} in column {col}, S = {s:?})", a[piv][col]),
            });
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..MEAS {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..MEAS {
            if i != col {
                let f = a[i][col];
                for j in 0..MEAS {
                    a[i][j] -= f * a[col][j];
                    inv[i][j] -= f * inv[col][j];
                }
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Textbook Kalman filter on heap matrices, written independently of the
    /// fixed-size implementation above.
    mod naive {
        pub type M = Vec<Vec<f64>>;

        pub fn zeros(r: usize, c: usize) -> M {
            vec![vec![0.0; c]; r]
        }

        pub fn eye(n: usize) -> M {
            let mut m = zeros(n, n);
            for (i, row) in m.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            m
        }

        pub fn mul(a: &M, b: &M) -> M {
            let mut c = zeros(a.len(), b[0].len());
            for i in 0..a.len() {
                for j in 0..b[0].len() {
                    c[i][j] = (0..b.len()).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            c
        }

        pub fn t(a: &M) -> M {
            let mut c = zeros(a[0].len(), a.len());
            for i in 0..a.len() {
                for j in 0..a[0].len() {
                    c[j][i] = a[i][j];
                }
            }
            c
        }

        pub fn add(a: &M, b: &M) -> M {
            a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
        }

        pub fn sub(a: &M, b: &M) -> M {
            a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x - y).collect()).collect()
        }

        /// Inverse via the adjugate-free Gauss–Jordan on an augmented matrix.
        pub fn inv(a: &M) -> M {
            let n = a.len();
            let mut aug: M = a.iter().zip(eye(n)).map(|(r, e)| r.iter().cloned().chain(e).collect()).collect();
            for c in 0..n {
                let p = (c..n).max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs())).unwrap();
                aug.swap(c, p);
                let d = aug[c][c];
                aug[c].iter_mut().for_each(|v| *v /= d);
                for r in 0..n {
                    if r != c {
                        let f = aug[r][c];
                        let row_c = aug[c].clone();
                        aug[r].iter_mut().zip(row_c).for_each(|(v, w)| *v -= f * w);
                    }
                }
            }
            aug.into_iter().map(|r| r[n..].to_vec()).collect()
        }

        pub fn f() -> M {
            let mut f = eye(8);
            for i in 0..4 {
                f[i][i + 4] = 1.0;
            }
            f
        }

        pub fn h() -> M {
            let mut h = zeros(4, 8);
            for i in 0..4 {
                h[i][i] = 1.0;
            }
            h
        }
    }

    fn to_m(m: &Mat8) -> naive::M {
        m.iter().map(|r| r.to_vec()).collect()
    }

    fn sym_psd(p: &Mat8) -> bool {
        for i in 0..DIM {
            if p[i][i] < 0.0 {
                return false;
            }
            for j in 0..DIM {
                if (p[i][j] - p[j][i]).abs() > 1e-9 {
                    return false;
                }
            }
        }
        min_eigenvalue(p) > -1e-9
    }

    /// Smallest eigenvalue by cyclic Jacobi rotations.
    fn min_eigenvalue(p: &Mat8) -> f64 {
        let mut a = *p;
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..DIM {
                for j in 0..DIM {
                    if i != j {
                        off += a[i][j] * a[i][j];
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
            for pi in 0..DIM {
                for q in pi + 1..DIM {
                    if a[pi][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[pi][pi]) / (2.0 * a[pi][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..DIM {
                        let (akp, akq) = (a[k][pi], a[k][q]);
                        a[k][pi] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..DIM {
                        let (apk, aqk) = (a[pi][k], a[q][k]);
                        a[pi][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..DIM).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn predict_moves_by_velocity() {
        let k = KalmanState::new([0.0, 0.0, 10.0, 10.0, 1.0, 1.0, 0.0, 0.0], &KalmanConfig::default());
        let (x, _) = k.predict();
        assert_eq!(&x[..4], &[1.0, 1.0, 10.0, 10.0]);
        let still = KalmanState::new([3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0], &KalmanConfig::default());
        assert_eq!(&still.predict().0[..4], &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cfg = KalmanConfig::default();
        let mut k = KalmanState::new([5.0, 5.0, 2.0, 3.0, 0.1, -0.1, 0.0, 0.0], &cfg);
        let mut x: naive::M = k.mean.iter().map(|&v| vec![v]).collect();
        let mut p = to_m(&k.cov);
        let (f, h, q, r) = (naive::f(), naive::h(), to_m(&k.q), {
            let mut r = naive::zeros(4, 4);
            for i in 0..4 {
                r[i][i] = cfg.r;
            }
            r
        });
        for _ in 0..100 {
            k.predict_in_place();
            x = naive::mul(&f, &x);
            p = naive::add(&naive::mul(&naive::mul(&f, &p), &naive::t(&f)), &q);
            let b = BBox::from_center(
                rng.gen_range(0.0..20.0),
                rng.gen_range(0.0..20.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(1.0..5.0),
            );
            k.update(&b).unwrap();
            let (cx, cy) = b.center();
            let z = vec![vec![cx], vec![cy], vec![b.w], vec![b.h]];
            let s = naive::add(&naive::mul(&naive::mul(&h, &p), &naive::t(&h)), &r);
            let kg = naive::mul(&naive::mul(&p, &naive::t(&h)), &naive::inv(&s));
            x = naive::add(&x, &naive::mul(&kg, &naive::sub(&z, &naive::mul(&h, &x))));
            let ikh = naive::sub(&naive::eye(8), &naive::mul(&kg, &h));
            p = naive::add(
                &naive::mul(&naive::mul(&ikh, &p), &naive::t(&ikh)),
                &naive::mul(&naive::mul(&kg, &r), &naive::t(&kg)),
            );
            for i in 0..DIM {
                assert!((k.mean[i] - x[i][0]).abs() < 1e-9);
                for j in 0..DIM {
                    assert!((k.cov[i][j] - p[i][j]).abs() < 1e-9);
                }
            }
            assert!(sym_psd(&k.cov));
        }
    }

    #[test]
    fn tiny_noise_snaps_to_measurement() {
        let cfg = KalmanConfig {
            r: 1e-12,
            ..KalmanConfig::default()
        };
        let mut k = KalmanState::from_box(&BBox::new(10.0, 10.0, 20.0, 20.0), &cfg).unwrap();
        k.predict_in_place();
        let m = BBox::new(17.0, 13.0, 22.0, 18.0);
        k.update(&m).unwrap();
        let b = k.to_box();
        assert!((b.x - m.x).abs() < 1e-6 && (b.y - m.y).abs() < 1e-6);
        assert!((b.w - m.w).abs() < 1e-6 && (b.h - m.h).abs() < 1e-6);
    }

    #[test]
    fn noiseless_constant_velocity_extrapolates() {
        let cfg = KalmanConfig {
            r: 1e-12,
            ..KalmanConfig::default()
        };
        let at = |c: f64| BBox::from_center(c, c, 10.0, 10.0);
        let mut k = KalmanState::from_box(&at(0.0), &cfg).unwrap();
        for c in [1.0, 2.0] {
            k.predict_in_place();
            k.update(&at(c)).unwrap();
        }
        let (x, _) = k.predict();
        let (cx, cy) = (x[0] * k.scale, x[1] * k.scale);
        assert!((cx - 3.0).abs() < 1e-3 && (cy - 3.0).abs() < 1e-3, "{cx} {cy}");
    }

    #[test]
    fn covariance_stays_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut k = KalmanState::from_box(&BBox::new(0.0, 0.0, 8.0, 8.0), &KalmanConfig::default()).unwrap();
        for step in 0..1000 {
            k.predict_in_place();
            if rng.gen_bool(0.7) {
                let b = BBox::new(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(1.0..20.0),
                    rng.gen_range(1.0..20.0),
                );
                k.update(&b).unwrap();
            }
            assert!(sym_psd(&k.cov), "step {step}");
        }
    }

    #[test]
    fn singular_innovation_is_reported() {
        let cfg = KalmanConfig {
            r: 0.0,
            p0: 0.0,
            q_pos: 0.0,
            q_vel: 0.0,
        };
        let mut k = KalmanState::new([0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &cfg);
        let e = k.update(&BBox::new(0.0, 0.0, 1.0, 1.0)).unwrap_err();
        assert!(matches!(e, Error::Numeric { op: "kf_update", .. }));
    }
}
