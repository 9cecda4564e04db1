//! Four-node plane-stress elements, assembly and the linear solve.
//!
//! Voigt convention: stress (s_xx, s_yy, s_xy), strain (e_xx, e_yy, g_xy)
//! with engineering shear, so `sigma = C * eps` with a symmetric 3x3 `C` in
//! N/cm^2. Quadrature is 2x2 Gauss; material is supplied per quadrature
//! point. Dirichlet constraints are eliminated (rows and columns dropped),
//! which keeps the reduced system symmetric positive definite.

use nalgebra::{Matrix3, SMatrix};

use crate::error::FemError;
use crate::mesh::{Mesh2D, MeshHierarchy};
use crate::real::{real, Real};
use crate::sparse::{CholeskyFactor, CholeskySymbolic, SparseError, SymmetricCsc};

/// Relative residual bound enforced after every solve. Calibrated for
/// f64 solves; an f32 instantiation of the solver will trip it.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// Gauss points of the 2x2 rule on [-1, 1]^2, unit weights.
pub fn gauss_points<T: Real>() -> [[T; 2]; 4] {
    let g = T::one() / real::<T>(3.0).sqrt();
    [[-g, -g], [g, -g], [g, g], [-g, g]]
}

/// Shape function derivatives w.r.t. (xi, eta) at one point.
fn shape_derivatives<T: Real>(xi: T, eta: T) -> ([T; 4], [T; 4]) {
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

/// Strain-displacement matrix and Jacobian determinant at one Gauss point.
fn b_matrix<T: Real>(coords: &[[T; 2]; 4], xi: T, eta: T) -> (SMatrix<T, 3, 8>, T) {
    let (dn_dxi, dn_deta) = shape_derivatives(xi, eta);
    let (mut j00, mut j01, mut j10, mut j11) = (T::zero(), T::zero(), T::zero(), T::zero());
    for a in 0..4 {
        j00 += dn_dxi[a] * coords[a][0];
        j01 += dn_dxi[a] * coords[a][1];
        j10 += dn_deta[a] * coords[a][0];
        j11 += dn_deta[a] * coords[a][1];
    }
    let det = j00 * j11 - j01 * j10;
    let inv_det = T::one() / det;
    let mut b = SMatrix::<T, 3, 8>::zeros();
    for a in 0..4 {
        let dndx = (j11 * dn_dxi[a] - j01 * dn_deta[a]) * inv_det;
        let dndy = (-j10 * dn_dxi[a] + j00 * dn_deta[a]) * inv_det;
        b[(0, 2 * a)] = dndx;
        b[(1, 2 * a + 1)] = dndy;
        b[(2, 2 * a)] = dndy;
        b[(2, 2 * a + 1)] = dndx;
    }
    (b, det)
}

/// 8x8 element stiffness with material given at the four Gauss points.
pub fn element_stiffness<T: Real>(
    coords: &[[T; 2]; 4],
    c_at_gp: &[Matrix3<T>; 4],
) -> SMatrix<T, 8, 8> {
    let mut ke = SMatrix::<T, 8, 8>::zeros();
    for (k, [xi, eta]) in gauss_points::<T>().into_iter().enumerate() {
        let (b, det) = b_matrix(coords, xi, eta);
        ke += b.transpose() * c_at_gp[k] * b * det;
    }
    // exact structural symmetry for the assembled matrix
    let half = real::<T>(0.5);
    (ke + ke.transpose()) * half
}

/// Symmetry plus positive definiteness, the admission test for sampled
/// elasticity matrices.
pub fn is_spd<T: Real>(c: &Matrix3<T>, rel_tol: T) -> bool {
    let mut scale = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            scale = scale.max(c[(i, j)].abs());
        }
    }
    if scale == T::zero() {
        return false;
    }
    for i in 0..3 {
        for j in i + 1..3 {
            if (c[(i, j)] - c[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    nalgebra::Cholesky::new(*c).is_some()
}

/// Consistent nodal forces from the mesh's Neumann edges, scaled by `scale`
/// (plate hierarchies store unit-resultant tractions).
pub fn neumann_load_vector<T: Real>(mesh: &Mesh2D<T>, scale: T) -> Vec<T> {
    let mut f = vec![T::zero(); 2 * mesh.n_nodes()];
    let half = real::<T>(0.5);
    for ne in &mesh.neumann_edges {
        let e = &mesh.elements[ne.element];
        let a = e[ne.edge];
        let b = e[(ne.edge + 1) % 4];
        let pa = mesh.nodes[a];
        let pb = mesh.nodes[b];
        let dx = pb[0] - pa[0];
        let dy = pb[1] - pa[1];
        let len = (dx * dx + dy * dy).sqrt();
        let fx = ne.traction[0] * len * half * scale;
        let fy = ne.traction[1] * len * half * scale;
        f[2 * a] += fx;
        f[2 * a + 1] += fy;
        f[2 * b] += fx;
        f[2 * b + 1] += fy;
    }
    f
}

fn check_materials<T: Real>(mesh: &Mesh2D<T>, materials: &[Matrix3<T>]) -> Result<(), FemError> {
    let want = 4 * mesh.n_elements();
    if materials.len() != want {
        return Err(FemError::MaterialCount {
            got: materials.len(),
            want,
        });
    }
    let tol = real::<T>(1e-12);
    for (k, c) in materials.iter().enumerate() {
        if !is_spd(c, tol) {
            return Err(FemError::MaterialNotSpd {
                element: k / 4,
                gauss: k % 4,
            });
        }
    }
    Ok(())
}

/// Full-matrix triplets (both triangles) for the given material field,
/// laid out as `materials[4 * element + gauss]`.
fn stiffness_triplets<T: Real>(
    mesh: &Mesh2D<T>,
    materials: &[Matrix3<T>],
) -> Vec<(usize, usize, T)> {
    let mut trips = Vec::with_capacity(64 * mesh.n_elements());
    for (ei, e) in mesh.elements.iter().enumerate() {
        let coords = [
            mesh.nodes[e[0]],
            mesh.nodes[e[1]],
            mesh.nodes[e[2]],
            mesh.nodes[e[3]],
        ];
        let c: &[Matrix3<T>; 4] = materials[4 * ei..4 * ei + 4].try_into().expect("length 4");
        let ke = element_stiffness(&coords, c);
        let dofs = [
            2 * e[0],
            2 * e[0] + 1,
            2 * e[1],
            2 * e[1] + 1,
            2 * e[2],
            2 * e[2] + 1,
            2 * e[3],
            2 * e[3] + 1,
        ];
        for a in 0..8 {
            for b in 0..8 {
                trips.push((dofs[a], dofs[b], ke[(a, b)]));
            }
        }
    }
    trips
}

/// Solve with explicit single-DOF constraints `fixed = [(dof, value)]` and
/// a full-length load vector. Returns the full displacement vector.
///
/// This is the general entry used by verification problems (patch test,
/// rollers, prescribed boundary displacement); [`assemble_and_solve`] is the
/// standard path for a mesh's own boundary conditions.
pub fn solve_constrained<T: Real>(
    mesh: &Mesh2D<T>,
    materials: &[Matrix3<T>],
    fixed: &[(usize, T)],
    load: &[T],
) -> Result<Vec<T>, FemError> {
    check_materials(mesh, materials)?;
    let n_dof = 2 * mesh.n_nodes();
    assert_eq!(load.len(), n_dof, "load vector length");

    let mut prescribed: Vec<Option<T>> = vec![None; n_dof];
    for &(dof, v) in fixed {
        assert!(dof < n_dof, "constrained dof out of range");
        prescribed[dof] = Some(v);
    }
    let mut free_index = vec![usize::MAX; n_dof];
    let mut n_free = 0usize;
    for (dof, p) in prescribed.iter().enumerate() {
        if p.is_none() {
            free_index[dof] = n_free;
            n_free += 1;
        }
    }
    if n_free == 0 {
        // everything prescribed
        return Ok(prescribed.iter().map(|p| p.unwrap_or_else(T::zero)).collect());
    }

    let trips = stiffness_triplets(mesh, materials);
    let mut reduced = Vec::with_capacity(trips.len());
    let mut rhs: Vec<T> = (0..n_dof)
        .filter(|&d| prescribed[d].is_none())
        .map(|d| load[d])
        .collect();
    for (i, j, v) in trips {
        match (prescribed[i], prescribed[j]) {
            (None, None) => reduced.push((free_index[i], free_index[j], v)),
            (None, Some(g)) => {
                if g != T::zero() {
                    rhs[free_index[i]] -= v * g;
                }
            }
            _ => {}
        }
    }
    let k = SymmetricCsc::from_triplets(n_free, &reduced).expect("indices in range");
    let symbolic = CholeskySymbolic::new(&k);
    let factor = CholeskyFactor::factorize(&k, &symbolic).map_err(|e| match e {
        SparseError::NotPositiveDefinite { col } => FemError::Singular(format!(
            "stiffness not positive definite at reduced dof {col} (missing constraints?)"
        )),
        other => FemError::Singular(other.to_string()),
    })?;

    let mut u_free = rhs.clone();
    factor.solve_in_place(&mut u_free);

    // residual check on the reduced system
    let mut ku = vec![T::zero(); n_free];
    k.mul_vec(&u_free, &mut ku);
    let mut r2 = T::zero();
    let mut f2 = T::zero();
    for i in 0..n_free {
        let r = ku[i] - rhs[i];
        r2 += r * r;
        f2 += rhs[i] * rhs[i];
    }
    if f2 > T::zero() {
        let rel = (r2 / f2).sqrt().to_f64_lossy();
        if rel > RESIDUAL_TOL {
            return Err(FemError::ResidualTooLarge {
                residual: rel,
                tol: RESIDUAL_TOL,
            });
        }
    }

    let mut u = vec![T::zero(); n_dof];
    for dof in 0..n_dof {
        u[dof] = match prescribed[dof] {
            Some(g) => g,
            None => u_free[free_index[dof]],
        };
    }
    Ok(u)
}

/// Per-node displacement and its Euclidean norm (the "total displacement").
#[derive(Debug, Clone)]
pub struct DisplacementField<T> {
    pub level: usize,
    pub u: Vec<[T; 2]>,
    pub total: Vec<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn from_flat(level: usize, flat: &[T]) -> Self {
        let n = flat.len() / 2;
        let mut u = Vec::with_capacity(n);
        let mut total = Vec::with_capacity(n);
        for i in 0..n {
            let ux = flat[2 * i];
            let uy = flat[2 * i + 1];
            u.push([ux, uy]);
            total.push((ux * ux + uy * uy).sqrt());
        }
        Self { level, u, total }
    }
}

/// Assemble and solve the mesh's own boundary-value problem: homogeneous
/// Dirichlet at `dirichlet_nodes`, Neumann tractions scaled by
/// `load_resultant` (in N for unit-resultant plate tractions).
pub fn assemble_and_solve<T: Real>(
    mesh: &Mesh2D<T>,
    materials: &[Matrix3<T>],
    load_resultant: T,
) -> Result<DisplacementField<T>, FemError> {
    let fixed: Vec<(usize, T)> = mesh
        .dirichlet_nodes
        .iter()
        .flat_map(|&n| [(2 * n, T::zero()), (2 * n + 1, T::zero())])
        .collect();
    let load = neumann_load_vector(mesh, load_resultant);
    let u = solve_constrained(mesh, materials, &fixed, &load)?;
    Ok(DisplacementField::from_flat(mesh.level, &u))
}

/// Total displacement at the hierarchy's common nodes, ordered by level-0
/// node id.
pub fn extract_qoi<T: Real>(
    field: &DisplacementField<T>,
    hierarchy: &MeshHierarchy<T>,
) -> Result<Vec<T>, FemError> {
    if field.level >= hierarchy.n_levels()
        || hierarchy.meshes[field.level].n_nodes() != field.total.len()
    {
        return Err(FemError::LevelMismatch {
            field: field.level,
            want: hierarchy.n_levels().saturating_sub(1),
        });
    }
    Ok(hierarchy.common_nodes[field.level]
        .iter()
        .map(|&i| field.total[i])
        .collect())
}
