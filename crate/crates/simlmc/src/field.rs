//! Truncated Karhunen-Loeve machinery for homogeneous Gaussian random
//! fields with squared-exponential autocorrelation.
//!
//! One basis is built on the finest mesh of a hierarchy; every level
//! evaluates that same basis at its own nodes and quadrature points, which
//! couples the field realizations across levels exactly (the coarse and
//! fine solves of one sample see the same field).
//!
//! The discrete eigenproblem is the Nystrom/Galerkin form with lumped mass
//! weighting: with W the diagonal lumped mass matrix and C the kernel
//! matrix on the reference nodes, solve the symmetric problem
//! B = W^{1/2} C W^{1/2}, then map eigenvectors back by W^{-1/2}. The
//! resulting nodal eigenfunctions are orthonormal in the discrete inner
//! product <f, g> = f^T W g.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::FieldError;
use crate::fem::gauss_points;
use crate::mesh::Mesh2D;
use crate::real::{real, Real};

/// Number of independent Gaussian germ fields driving the material model
/// (the entries of a 3x3 upper-triangular germ).
pub const FIELD_COUNT: usize = 6;

/// Squared-exponential (Gaussian) covariance kernel,
/// c(d) = variance * exp(-(dx/lx)^2 - (dy/ly)^2).
#[derive(Debug, Clone, Copy)]
pub struct CovarianceKernel<T> {
    pub lx: T,
    pub ly: T,
    pub variance: T,
}

impl<T: Real> CovarianceKernel<T> {
    pub fn gaussian(lx: T, ly: T, variance: T) -> Result<Self, FieldError> {
        if lx <= T::zero() {
            return Err(FieldError::BadCorrelationLength(lx.to_f64_lossy()));
        }
        if ly <= T::zero() {
            return Err(FieldError::BadCorrelationLength(ly.to_f64_lossy()));
        }
        Ok(Self { lx, ly, variance })
    }

    /// Unit-variance kernel, the standard germ-field case.
    pub fn standard(lx: T, ly: T) -> Result<Self, FieldError> {
        Self::gaussian(lx, ly, T::one())
    }

    pub fn eval(&self, p: [T; 2], q: [T; 2]) -> T {
        let dx = (p[0] - q[0]) / self.lx;
        let dy = (p[1] - q[1]) / self.ly;
        self.variance * (-(dx * dx) - dy * dy).exp()
    }
}

/// Bilinear interpolation weights of a batch of points on the reference
/// mesh; reusable across samples and fields.
#[derive(Debug, Clone)]
pub struct PointWeights<T> {
    /// Per point: the four reference node ids and their weights.
    pub entries: Vec<([usize; 4], [T; 4])>,
}

impl<T: Real> PointWeights<T> {
    /// Interpolate a nodal vector at the batch points.
    pub fn apply(&self, nodal: &[T], out: &mut [T]) {
        for (k, (ids, w)) in self.entries.iter().enumerate() {
            out[k] = nodal[ids[0]] * w[0]
                + nodal[ids[1]] * w[1]
                + nodal[ids[2]] * w[2]
                + nodal[ids[3]] * w[3];
        }
    }
}

/// Truncated KLE basis on a reference mesh.
#[derive(Debug, Clone)]
pub struct KleBasis<T> {
    /// Truncation order M.
    pub order: usize,
    /// Eigenvalues, sorted non-increasing, clamped at 0.
    pub eigenvalues: Vec<T>,
    /// Nodal eigenfunction values, column k = phi_k (n_nodes x M).
    pub eigenfunctions: DMatrix<T>,
    /// (sum of kept eigenvalues) / trace of the discrete operator.
    pub captured_fraction: T,
    ref_nodes: Vec<[T; 2]>,
    ref_elements: Vec<[usize; 4]>,
    ref_bbox: Vec<[T; 4]>,
}

/// Lumped mass weights: w_i = integral of shape function N_i over the mesh.
fn lumped_mass<T: Real>(mesh: &Mesh2D<T>) -> Vec<T> {
    let mut w = vec![T::zero(); mesh.n_nodes()];
    let quarter = real::<T>(0.25);
    let one = T::one();
    for e in &mesh.elements {
        let coords = [
            mesh.nodes[e[0]],
            mesh.nodes[e[1]],
            mesh.nodes[e[2]],
            mesh.nodes[e[3]],
        ];
        for [xi, eta] in gauss_points::<T>() {
            let n = [
                quarter * (one - xi) * (one - eta),
                quarter * (one + xi) * (one - eta),
                quarter * (one + xi) * (one + eta),
                quarter * (one - xi) * (one + eta),
            ];
            let (dn_dxi, dn_deta) = shape_grads(xi, eta);
            let det = jac_det(&coords, &dn_dxi, &dn_deta);
            for a in 0..4 {
                w[e[a]] += n[a] * det;
            }
        }
    }
    w
}

fn shape_grads<T: Real>(xi: T, eta: T) -> ([T; 4], [T; 4]) {
    let q = real::<T>(0.25);
    let one = T::one();
    (
        [
            -q * (one - eta),
            q * (one - eta),
            q * (one + eta),
            -q * (one + eta),
        ],
        [
            -q * (one - xi),
            -q * (one + xi),
            q * (one + xi),
            q * (one - xi),
        ],
    )
}

fn jac_det<T: Real>(coords: &[[T; 2]; 4], dn_dxi: &[T; 4], dn_deta: &[T; 4]) -> T {
    let (mut j00, mut j01, mut j10, mut j11) = (T::zero(), T::zero(), T::zero(), T::zero());
    for a in 0..4 {
        j00 += dn_dxi[a] * coords[a][0];
        j01 += dn_dxi[a] * coords[a][1];
        j10 += dn_deta[a] * coords[a][0];
        j11 += dn_deta[a] * coords[a][1];
    }
    j00 * j11 - j01 * j10
}

/// Solve the mass-weighted Nystrom eigenproblem of the kernel on the
/// reference mesh nodes and keep the top `order` modes.
pub fn build_kle<T: Real>(
    kernel: &CovarianceKernel<T>,
    reference_mesh: &Mesh2D<T>,
    order: usize,
) -> Result<KleBasis<T>, FieldError> {
    let n = reference_mesh.n_nodes();
    if order == 0 || order > n {
        return Err(FieldError::OrderTooLarge { m: order, nodes: n });
    }
    let w = lumped_mass(reference_mesh);
    let sqrt_w: Vec<T> = w.iter().map(|&x| x.sqrt()).collect();

    let mut b = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(reference_mesh.nodes[i], reference_mesh.nodes[j])
                * sqrt_w[i]
                * sqrt_w[j];
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    let trace = (0..n).map(|i| b[(i, i)]).fold(T::zero(), |a, x| a + x);

    let eig = b.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &bk| {
        eig.eigenvalues[bk]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("NaN eigenvalue")
    });
    let lambda_max = eig.eigenvalues[idx[0]];
    let psd_floor = -real::<T>(1e-8) * lambda_max;

    let mut eigenvalues = Vec::with_capacity(order);
    let mut eigenfunctions = DMatrix::<T>::zeros(n, order);
    for (k, &src) in idx.iter().take(order).enumerate() {
        let lam = eig.eigenvalues[src];
        if lam < psd_floor {
            return Err(FieldError::NotPsd(lam.to_f64_lossy()));
        }
        eigenvalues.push(lam.max(T::zero()));
        // phi = W^{-1/2} psi, sign fixed by first-nonzero-positive
        let col = eig.eigenvectors.column(src);
        let mut max_abs = T::zero();
        for i in 0..n {
            max_abs = max_abs.max(col[i].abs());
        }
        let threshold = real::<T>(1e-12) * max_abs;
        let mut sign = T::one();
        for i in 0..n {
            if col[i].abs() > threshold {
                if col[i] < T::zero() {
                    sign = -T::one();
                }
                break;
            }
        }
        for i in 0..n {
            eigenfunctions[(i, k)] = sign * col[i] / sqrt_w[i];
        }
    }
    let kept = eigenvalues.iter().fold(T::zero(), |a, &x| a + x);
    let captured_fraction = kept / trace;

    let ref_bbox = reference_mesh
        .elements
        .iter()
        .map(|e| {
            let mut bb = [
                T::max_value().unwrap(),
                -T::max_value().unwrap(),
                T::max_value().unwrap(),
                -T::max_value().unwrap(),
            ];
            for &nid in e {
                let p = reference_mesh.nodes[nid];
                bb[0] = bb[0].min(p[0]);
                bb[1] = bb[1].max(p[0]);
                bb[2] = bb[2].min(p[1]);
                bb[3] = bb[3].max(p[1]);
            }
            bb
        })
        .collect();

    Ok(KleBasis {
        order,
        eigenvalues,
        eigenfunctions,
        captured_fraction,
        ref_nodes: reference_mesh.nodes.clone(),
        ref_elements: reference_mesh.elements.clone(),
        ref_bbox,
    })
}

impl<T: Real> KleBasis<T> {
    pub fn n_ref_nodes(&self) -> usize {
        self.ref_nodes.len()
    }

    /// Residual of the discrete eigenproblem for mode k,
    /// || C W phi_k - lambda_k phi_k ||_inf. Diagnostic used by tests.
    pub fn eigen_residual(&self, kernel: &CovarianceKernel<T>, mesh: &Mesh2D<T>, k: usize) -> T {
        let w = lumped_mass(mesh);
        let n = self.ref_nodes.len();
        let mut worst = T::zero();
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc += kernel.eval(self.ref_nodes[i], self.ref_nodes[j])
                    * w[j]
                    * self.eigenfunctions[(j, k)];
            }
            let r = (acc - self.eigenvalues[k] * self.eigenfunctions[(i, k)]).abs();
            worst = worst.max(r);
        }
        worst
    }

    /// Bilinear interpolation weights for a batch of points; errors on any
    /// point outside the reference mesh.
    pub fn point_weights(&self, points: &[[T; 2]]) -> Result<PointWeights<T>, FieldError> {
        let entries = points
            .iter()
            .map(|&p| self.locate(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PointWeights { entries })
    }

    fn locate(&self, p: [T; 2]) -> Result<([usize; 4], [T; 4]), FieldError> {
        let tol = real::<T>(1e-9);
        let pad = real::<T>(1e-9);
        for (ei, bb) in self.ref_bbox.iter().enumerate() {
            let w = (bb[1] - bb[0]).max(bb[3] - bb[2]);
            let m = pad * (T::one() + w);
            if p[0] < bb[0] - m || p[0] > bb[1] + m || p[1] < bb[2] - m || p[1] > bb[3] + m {
                continue;
            }
            let e = &self.ref_elements[ei];
            let coords = [
                self.ref_nodes[e[0]],
                self.ref_nodes[e[1]],
                self.ref_nodes[e[2]],
                self.ref_nodes[e[3]],
            ];
            if let Some((xi, eta)) = invert_bilinear(&coords, p, tol) {
                let one = T::one();
                let q = real::<T>(0.25);
                let w = [
                    q * (one - xi) * (one - eta),
                    q * (one + xi) * (one - eta),
                    q * (one + xi) * (one + eta),
                    q * (one - xi) * (one + eta),
                ];
                return Ok((*e, w));
            }
        }
        Err(FieldError::PointOutsideDomain {
            x: p[0].to_f64_lossy(),
            y: p[1].to_f64_lossy(),
        })
    }

    /// Nodal coefficient field sum_k sqrt(lambda_k) xi_k phi_k; interpolating
    /// this vector is the same as interpolating each mode separately.
    pub fn nodal_combination(&self, xi_row: &[T]) -> Result<Vec<T>, FieldError> {
        if xi_row.len() != self.order {
            return Err(FieldError::CoefficientLength {
                got: xi_row.len(),
                want: self.order,
            });
        }
        let n = self.ref_nodes.len();
        let mut nodal = vec![T::zero(); n];
        for k in 0..self.order {
            let scale = self.eigenvalues[k].sqrt() * xi_row[k];
            if scale == T::zero() {
                continue;
            }
            let col = self.eigenfunctions.column(k);
            for i in 0..n {
                nodal[i] += scale * col[i];
            }
        }
        Ok(nodal)
    }

    /// Evaluate the field g(x) = sum_k sqrt(lambda_k) phi_k(x) xi_k at
    /// arbitrary points inside the reference mesh.
    pub fn evaluate_field(&self, xi_row: &[T], points: &[[T; 2]]) -> Result<Vec<T>, FieldError> {
        let weights = self.point_weights(points)?;
        let nodal = self.nodal_combination(xi_row)?;
        let mut out = vec![T::zero(); points.len()];
        weights.apply(&nodal, &mut out);
        Ok(out)
    }

    /// Pointwise variance of the truncated field at a reference node,
    /// sum_k lambda_k phi_k(x)^2.
    pub fn truncated_variance_at_node(&self, node: usize) -> T {
        (0..self.order)
            .map(|k| self.eigenvalues[k] * self.eigenfunctions[(node, k)] * self.eigenfunctions[(node, k)])
            .fold(T::zero(), |a, x| a + x)
    }
}

/// Newton inversion of the bilinear map; returns local coordinates if the
/// point lies inside the element (within tolerance).
fn invert_bilinear<T: Real>(coords: &[[T; 2]; 4], p: [T; 2], tol: T) -> Option<(T, T)> {
    let one = T::one();
    let q = real::<T>(0.25);
    let mut xi = T::zero();
    let mut eta = T::zero();
    for _ in 0..30 {
        let n = [
            q * (one - xi) * (one - eta),
            q * (one + xi) * (one - eta),
            q * (one + xi) * (one + eta),
            q * (one - xi) * (one + eta),
        ];
        let mut x = T::zero();
        let mut y = T::zero();
        for a in 0..4 {
            x += n[a] * coords[a][0];
            y += n[a] * coords[a][1];
        }
        let rx = p[0] - x;
        let ry = p[1] - y;
        let (dn_dxi, dn_deta) = shape_grads(xi, eta);
        let (mut j00, mut j01, mut j10, mut j11) = (T::zero(), T::zero(), T::zero(), T::zero());
        for a in 0..4 {
            j00 += dn_dxi[a] * coords[a][0];
            j01 += dn_deta[a] * coords[a][0];
            j10 += dn_dxi[a] * coords[a][1];
            j11 += dn_deta[a] * coords[a][1];
        }
        let det = j00 * j11 - j01 * j10;
        if det.abs() < T::tiny() {
            return None;
        }
        let dxi = (j11 * rx - j01 * ry) / det;
        let deta = (-j10 * rx + j00 * ry) / det;
        xi += dxi;
        eta += deta;
        if dxi.abs() + deta.abs() < real(1e-14) {
            break;
        }
    }
    let lim = one + tol;
    if xi.abs() <= lim && eta.abs() <= lim {
        Some((xi.clamp(-one, one), eta.clamp(-one, one)))
    } else {
        None
    }
}

/// Independent standard normal coefficients for the germ fields of one
/// sample, reproducible from (master_seed, sample_id).
#[derive(Debug, Clone)]
pub struct GaussianDraw<T> {
    /// Row-major FIELD_COUNT x M.
    pub xi: Vec<T>,
    pub order: usize,
    pub sample_id: u64,
    pub master_seed: u64,
}

impl<T: Real> GaussianDraw<T> {
    pub fn row(&self, field: usize) -> &[T] {
        &self.xi[field * self.order..(field + 1) * self.order]
    }
}

/// Counter-based stream derivation: ChaCha12 keyed by the master seed with
/// the sample id as the stream number, so draws for distinct sample ids are
/// independent and any sample can be regenerated in isolation.
pub fn draw<T: Real>(master_seed: u64, sample_id: u64, order: usize) -> GaussianDraw<T>
where
    StandardNormal: Distribution<T>,
{
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&master_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).to_le_bytes());
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.set_stream(sample_id);
    let xi: Vec<T> = (0..FIELD_COUNT * order)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    GaussianDraw {
        xi,
        order,
        sample_id,
        master_seed,
    }
}

// ---------------------------------------------------------------------------
// basis cache file: header (M, node count, captured_fraction), eigenvalues,
// then the row-major eigenvector block; little-endian 64-bit floats
// ---------------------------------------------------------------------------

pub fn save_basis_cache<T: Real>(basis: &KleBasis<T>, path: &std::path::Path) -> Result<(), FieldError> {
    let n = basis.n_ref_nodes();
    let mut buf = Vec::with_capacity(24 + 8 * (basis.order + n * basis.order));
    buf.extend_from_slice(&(basis.order as u64).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&basis.captured_fraction.to_f64_lossy().to_le_bytes());
    for &l in &basis.eigenvalues {
        buf.extend_from_slice(&l.to_f64_lossy().to_le_bytes());
    }
    for i in 0..n {
        for k in 0..basis.order {
            buf.extend_from_slice(&basis.eigenfunctions[(i, k)].to_f64_lossy().to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| FieldError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load a cached basis for the given reference mesh (which must match the
/// cached node count).
pub fn load_basis_cache<T: Real>(
    path: &std::path::Path,
    reference_mesh: &Mesh2D<T>,
) -> Result<KleBasis<T>, FieldError> {
    let data = std::fs::read(path).map_err(|e| FieldError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |msg: &str| FieldError::BadCache {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    if data.len() < 24 {
        return Err(bad("truncated header"));
    }
    let order = u64::from_le_bytes(data[0..8].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    let captured = f64::from_le_bytes(data[16..24].try_into().unwrap());
    if n != reference_mesh.n_nodes() {
        return Err(bad(&format!(
            "cache built for {n} nodes, reference mesh has {}",
            reference_mesh.n_nodes()
        )));
    }
    let want = 24 + 8 * (order + n * order);
    if data.len() != want {
        return Err(bad(&format!("expected {want} bytes, found {}", data.len())));
    }
    let mut off = 24;
    let mut read_f64 = || {
        let v = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let eigenvalues: Vec<T> = (0..order).map(|_| real(read_f64())).collect();
    let mut eigenfunctions = DMatrix::<T>::zeros(n, order);
    for i in 0..n {
        for k in 0..order {
            eigenfunctions[(i, k)] = real(read_f64());
        }
    }
    let ref_bbox = reference_mesh
        .elements
        .iter()
        .map(|e| {
            let mut bb = [
                T::max_value().unwrap(),
                -T::max_value().unwrap(),
                T::max_value().unwrap(),
                -T::max_value().unwrap(),
            ];
            for &nid in e {
                let p = reference_mesh.nodes[nid];
                bb[0] = bb[0].min(p[0]);
                bb[1] = bb[1].max(p[0]);
                bb[2] = bb[2].min(p[1]);
                bb[3] = bb[3].max(p[1]);
            }
            bb
        })
        .collect();
    Ok(KleBasis {
        order,
        eigenvalues,
        eigenfunctions,
        captured_fraction: real(captured),
        ref_nodes: reference_mesh.nodes.clone(),
        ref_elements: reference_mesh.elements.clone(),
        ref_bbox,
    })
}
