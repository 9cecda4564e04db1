//! The FEM-backed sampling problem: wires the mesh hierarchy, the KLE germ
//! basis and the random elasticity model into a [`LevelSampler`] the MLMC
//! engine can drive.
//!
//! Per level, the interpolation weights at the quadrature points, the
//! reduced sparsity pattern, its symbolic factorization and the slot map
//! from element stiffness entries into the CSC value array are built once;
//! a sample then only evaluates germs, transforms them to elasticity
//! matrices, scatters stiffness values and runs the numeric factorization.
//!
//! Costs are deterministic work-model seconds (calibrated constants times
//! operation counts), not wall-clock measurements: sample allocations feed
//! back into the estimates, so reproducible outputs need reproducible
//! costs.

use nalgebra::Matrix3;

use crate::error::{Error, MlmcError};
use crate::fem::{element_stiffness, gauss_points, is_spd, neumann_load_vector};
use crate::field::{draw, GaussianDraw, KleBasis, PointWeights};
use crate::material::{c_from_t, FluctuationSampler, MeanElasticity};
use crate::mesh::MeshHierarchy;
use crate::mlmc::LevelSampler;
use crate::real::{real, Real};
use crate::sparse::{CholeskyFactor, CholeskySymbolic, SparseError, SymmetricCsc};
use rand_distr::{Distribution, StandardNormal};

/// Work-model cost of one element's material sampling + stiffness
/// contribution, in seconds (three Gamma quantiles per Gauss point
/// dominate). Calibrated on a 2.1 GHz x86-64 core.
const COST_PER_ELEMENT: f64 = 16.5e-6;
/// Work-model cost per factorization flop (column-length-squared count).
const COST_PER_FLOP: f64 = 1.2e-9;
/// Fixed per-solve overhead (scatter, triangular solves, QoI extraction).
const COST_SOLVE_BASE: f64 = 60.0e-6;
/// Per sample, the germ nodal combination costs 6 * n_ref_nodes * order
/// multiply-adds; shared between the two solves of a coupled sample.
const COST_PER_GERM_TERM: f64 = 0.37e-9;

const SPD_TOL: f64 = 1e-12;

struct LevelCache<T> {
    /// Interpolation weights of the 4 * n_elements Gauss points.
    gauss_weights: PointWeights<T>,
    /// Element corner coordinates.
    coords: Vec<[[T; 2]; 4]>,
    /// Reduced pattern (free DOFs only) with zeroed values.
    pattern: SymmetricCsc<T>,
    symbolic: CholeskySymbolic,
    /// Per element, the value-array slot of each (a, b) stiffness entry;
    /// u32::MAX marks constrained pairs.
    slots: Vec<[u32; 64]>,
    /// dof -> free index (usize::MAX for constrained dofs).
    free_index: Vec<usize>,
    /// Reduced load vector at the configured resultant.
    load: Vec<T>,
    /// Common-node ids on this level, by level-0 node id.
    common: Vec<usize>,
    /// Solve-only cost (excludes the per-sample germ evaluation).
    cost_solve: f64,
}

/// Stochastic plane-stress problem over a nested hierarchy.
pub struct ElasticityProblem<T> {
    pub hierarchy: MeshHierarchy<T>,
    pub basis: KleBasis<T>,
    pub mean: MeanElasticity<T>,
    pub sampler: FluctuationSampler<T>,
    pub load_resultant: T,
    pub master_seed: u64,
    pub kle_order: usize,
    levels: Vec<LevelCache<T>>,
}

impl<T: Real> ElasticityProblem<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(
        hierarchy: MeshHierarchy<T>,
        basis: KleBasis<T>,
        mean: MeanElasticity<T>,
        sampler: FluctuationSampler<T>,
        load_resultant: T,
        master_seed: u64,
    ) -> Result<Self, Error> {
        let kle_order = basis.order;
        let mut levels = Vec::with_capacity(hierarchy.n_levels());
        for (l, mesh) in hierarchy.meshes.iter().enumerate() {
            // Gauss point coordinates
            let mut pts = Vec::with_capacity(4 * mesh.n_elements());
            let mut coords = Vec::with_capacity(mesh.n_elements());
            for e in &mesh.elements {
                let c = [
                    mesh.nodes[e[0]],
                    mesh.nodes[e[1]],
                    mesh.nodes[e[2]],
                    mesh.nodes[e[3]],
                ];
                for [xi, eta] in gauss_points::<T>() {
                    let one = T::one();
                    let q = real::<T>(0.25);
                    let n = [
                        q * (one - xi) * (one - eta),
                        q * (one + xi) * (one - eta),
                        q * (one + xi) * (one + eta),
                        q * (one - xi) * (one + eta),
                    ];
                    let mut x = T::zero();
                    let mut y = T::zero();
                    for a in 0..4 {
                        x += n[a] * c[a][0];
                        y += n[a] * c[a][1];
                    }
                    pts.push([x, y]);
                }
                coords.push(c);
            }
            let gauss_weights = basis.point_weights(&pts)?;

            // reduced dof numbering
            let n_dof = 2 * mesh.n_nodes();
            let mut free_index = vec![usize::MAX; n_dof];
            {
                let mut constrained = vec![false; n_dof];
                for &nd in &mesh.dirichlet_nodes {
                    constrained[2 * nd] = true;
                    constrained[2 * nd + 1] = true;
                }
                let mut next = 0usize;
                for (dof, &c) in constrained.iter().enumerate() {
                    if !c {
                        free_index[dof] = next;
                        next += 1;
                    }
                }
            }
            let n_free = free_index.iter().filter(|&&i| i != usize::MAX).count();

            // structural pattern from unit entries
            let mut trips: Vec<(usize, usize, T)> = Vec::with_capacity(64 * mesh.n_elements());
            for e in &mesh.elements {
                let dofs = element_dofs(e);
                for &a in &dofs {
                    for &b in &dofs {
                        if free_index[a] != usize::MAX && free_index[b] != usize::MAX {
                            trips.push((free_index[a], free_index[b], T::zero()));
                        }
                    }
                }
            }
            let pattern = SymmetricCsc::from_triplets(n_free, &trips)
                .expect("indices in range by construction");
            let symbolic = CholeskySymbolic::new(&pattern);

            let mut slots = Vec::with_capacity(mesh.n_elements());
            for e in &mesh.elements {
                let dofs = element_dofs(e);
                let mut s = [u32::MAX; 64];
                for (ai, &a) in dofs.iter().enumerate() {
                    for (bi, &b) in dofs.iter().enumerate() {
                        if free_index[a] != usize::MAX && free_index[b] != usize::MAX {
                            let idx = pattern
                                .index_of(free_index[a], free_index[b])
                                .expect("pattern contains all element pairs");
                            s[8 * ai + bi] = idx as u32;
                        }
                    }
                }
                slots.push(s);
            }

            let full_load = neumann_load_vector(mesh, load_resultant);
            let load: Vec<T> = (0..n_dof)
                .filter(|&d| free_index[d] != usize::MAX)
                .map(|d| full_load[d])
                .collect();

            let cost_solve = COST_SOLVE_BASE
                + mesh.n_elements() as f64 * COST_PER_ELEMENT
                + symbolic.factor_flops() as f64 * COST_PER_FLOP;

            levels.push(LevelCache {
                gauss_weights,
                coords,
                pattern,
                symbolic,
                slots,
                free_index,
                load,
                common: hierarchy.common_nodes[l].clone(),
                cost_solve,
            });
        }
        Ok(Self {
            hierarchy,
            basis,
            mean,
            sampler,
            load_resultant,
            master_seed,
            kle_order,
            levels,
        })
    }

    /// Germ fields of a draw as nodal coefficient vectors on the reference
    /// mesh; each level interpolates these at its own Gauss points.
    fn germ_nodals(&self, d: &GaussianDraw<T>) -> Result<Vec<Vec<T>>, Error> {
        (0..crate::field::FIELD_COUNT)
            .map(|f| self.basis.nodal_combination(d.row(f)).map_err(Error::from))
            .collect()
    }

    /// One mesh solve for a given draw; returns the QoI at the common
    /// nodes.
    fn solve_level(&self, level: usize, germ_nodals: &[Vec<T>]) -> Result<Vec<T>, Error> {
        let cache = &self.levels[level];
        let n_pts = cache.gauss_weights.entries.len();

        // germ values at the Gauss points, field-major buffers
        let mut germs = vec![[T::zero(); 6]; n_pts];
        let mut buf = vec![T::zero(); n_pts];
        for (f, nodal) in germ_nodals.iter().enumerate() {
            cache.gauss_weights.apply(nodal, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                germs[k][f] = *v;
            }
        }

        // material per Gauss point, then stiffness scatter
        let mut values = vec![T::zero(); cache.pattern.nnz()];
        let spd_tol = real::<T>(SPD_TOL);
        let mut c_gp: [Matrix3<T>; 4] = [Matrix3::zeros(); 4];
        for (ei, coords) in cache.coords.iter().enumerate() {
            for g in 0..4 {
                let t = self.sampler.sample_t(&germs[4 * ei + g])?;
                let c = c_from_t(&self.mean, &t);
                if !is_spd(&c, spd_tol) {
                    return Err(crate::error::FemError::MaterialNotSpd {
                        element: ei,
                        gauss: g,
                    }
                    .into());
                }
                c_gp[g] = c;
            }
            let ke = element_stiffness(coords, &c_gp);
            let slots = &cache.slots[ei];
            for a in 0..8 {
                for b in 0..8 {
                    let s = slots[8 * a + b];
                    if s != u32::MAX {
                        values[s as usize] += ke[(a, b)];
                    }
                }
            }
        }

        let mut k = cache.pattern.clone();
        k.values = values;
        let factor = CholeskyFactor::factorize(&k, &cache.symbolic).map_err(|e| match e {
            SparseError::NotPositiveDefinite { col } => crate::error::FemError::Singular(format!(
                "level {level}: non-positive pivot at reduced dof {col}"
            )),
            other => crate::error::FemError::Singular(other.to_string()),
        })?;
        let mut u = cache.load.clone();
        factor.solve_in_place(&mut u);

        // residual check
        let mut ku = vec![T::zero(); u.len()];
        k.mul_vec(&u, &mut ku);
        let mut r2 = T::zero();
        let mut f2 = T::zero();
        for i in 0..u.len() {
            let r = ku[i] - cache.load[i];
            r2 += r * r;
            f2 += cache.load[i] * cache.load[i];
        }
        if f2 > T::zero() {
            let rel = (r2 / f2).sqrt().to_f64_lossy();
            if rel > crate::fem::RESIDUAL_TOL {
                return Err(crate::error::FemError::ResidualTooLarge {
                    residual: rel,
                    tol: crate::fem::RESIDUAL_TOL,
                }
                .into());
            }
        }

        // total displacement at the common nodes
        let qoi = cache
            .common
            .iter()
            .map(|&node| {
                let dx = cache.free_index[2 * node];
                let dy = cache.free_index[2 * node + 1];
                let ux = if dx == usize::MAX { T::zero() } else { u[dx] };
                let uy = if dy == usize::MAX { T::zero() } else { u[dy] };
                (ux * ux + uy * uy).sqrt()
            })
            .collect();
        Ok(qoi)
    }

    /// Full solve of one realization on one level (diagnostics and the
    /// deterministic regression paths).
    pub fn qoi_for_draw(&self, level: usize, d: &GaussianDraw<T>) -> Result<Vec<T>, Error> {
        let nodals = self.germ_nodals(d)?;
        self.solve_level(level, &nodals)
    }

    fn germ_cost(&self) -> f64 {
        (crate::field::FIELD_COUNT * self.basis.n_ref_nodes() * self.kle_order) as f64
            * COST_PER_GERM_TERM
    }

    fn wrap_err(sample_id: u64, e: Error) -> MlmcError {
        MlmcError::SampleFailed {
            sample_id,
            source: Box::new(e),
        }
    }
}

fn element_dofs(e: &[usize; 4]) -> [usize; 8] {
    [
        2 * e[0],
        2 * e[0] + 1,
        2 * e[1],
        2 * e[1] + 1,
        2 * e[2],
        2 * e[2] + 1,
        2 * e[3],
        2 * e[3] + 1,
    ]
}

impl<T: Real> LevelSampler<T> for ElasticityProblem<T>
where
    StandardNormal: Distribution<T>,
{
    fn n_nodes(&self) -> usize {
        self.hierarchy.n_common_nodes()
    }

    fn n_levels(&self) -> usize {
        self.hierarchy.n_levels()
    }

    fn level_size(&self, level: usize) -> T {
        self.hierarchy.meshes[level].element_size()
    }

    fn coupled_cost(&self, level: usize) -> f64 {
        let germ = self.germ_cost();
        if level == 0 {
            germ + self.levels[0].cost_solve
        } else {
            germ + self.levels[level].cost_solve + self.levels[level - 1].cost_solve
        }
    }

    fn single_cost(&self, level: usize) -> f64 {
        self.germ_cost() + self.levels[level].cost_solve
    }

    fn coupled_sample(
        &self,
        level: usize,
        sample_id: u64,
    ) -> Result<(Vec<T>, Option<Vec<T>>), MlmcError> {
        let d = draw::<T>(self.master_seed, sample_id, self.kle_order);
        let nodals = self
            .germ_nodals(&d)
            .map_err(|e| Self::wrap_err(sample_id, e))?;
        let fine = self
            .solve_level(level, &nodals)
            .map_err(|e| Self::wrap_err(sample_id, e))?;
        let coarse = if level > 0 {
            Some(
                self.solve_level(level - 1, &nodals)
                    .map_err(|e| Self::wrap_err(sample_id, e))?,
            )
        } else {
            None
        };
        Ok((fine, coarse))
    }

    fn single_sample(&self, level: usize, sample_id: u64) -> Result<Vec<T>, MlmcError> {
        let d = draw::<T>(self.master_seed, sample_id, self.kle_order);
        let nodals = self
            .germ_nodals(&d)
            .map_err(|e| Self::wrap_err(sample_id, e))?;
        self.solve_level(level, &nodals)
            .map_err(|e| Self::wrap_err(sample_id, e))
    }
}



#[cfg(test)]
mod smoke {
    use super::*;
    use crate::field::{build_kle, CovarianceKernel};
    use crate::material::{default_orthotropic_mean, delta_t_from_delta_c};
    use crate::mesh::build_plate_hierarchy;
    use crate::mlmc::{run_mc, run_mlmc, screening, Estimand, RunOptions, Targets};

    #[test]
    #[ignore = "manual end-to-end smoke run"]
    fn plate_end_to_end() {
        let t_start = std::time::Instant::now();
        let h = build_plate_hierarchy::<f64>(7.0, 21.7, 2, 6, 3).unwrap();
        let kernel = CovarianceKernel::standard(3.5, 3.5).unwrap();
        let basis = build_kle(&kernel, h.finest(), 100).unwrap();
        println!("captured fraction: {}", basis.captured_fraction);
        let mean = default_orthotropic_mean::<f64>();
        let dt = delta_t_from_delta_c(0.1, &mean).unwrap();
        let sampler = FluctuationSampler::new(dt).unwrap();
        let p = ElasticityProblem::new(h, basis, mean, sampler, 1500.0, 20260810).unwrap();

        let scr = screening(&p, 50).unwrap();
        println!("screening done at {:.1} s, report node {}", t_start.elapsed().as_secs_f64(), scr.report_node);
        for pt in scr.rate_points() {
            println!(
                "  l={} h={:.4} meanY={:+.4e} V={:.4e} Z={:+.4e} V2={:.4e} C={:.5e}",
                pt.level, pt.h, pt.mean_y, pt.v_l, pt.z_l, pt.v_l2, pt.cost
            );
        }
        match scr.rates() {
            Ok(r) => println!(
                "rates: alpha={:.3} beta={:.3} gamma={:.3} alpha_v={:.3} beta_v={:.3} cond=({},{}) regime={}",
                r.alpha, r.beta, r.gamma, r.alpha_v, r.beta_v, r.cond_mean, r.cond_var, r.regime.label()
            ),
            Err(e) => println!("rates fit failed: {e}"),
        }

        let targets = Targets { eps_s_sq_half: 0.2e-3, eps_vs_sq_half: 0.2e-3, level_max: 3 };
        let mean_run = run_mlmc(&p, &scr, &targets, Estimand::Mean, &RunOptions { phase: 1, ..Default::default() }).unwrap();
        println!(
            "MLMC mean: N={:?} e_s={:.3e} abs={:.3e} kappa={:.4e} cost={:.3} iters={} wall={:.1}s",
            mean_run.n_l, mean_run.achieved_es.unwrap(), mean_run.achieved_abs_mean.unwrap(),
            mean_run.kappa, mean_run.total_cost, mean_run.iterations, mean_run.wall_seconds
        );
        let var_run = run_mlmc(&p, &scr, &targets, Estimand::Variance, &RunOptions { phase: 2, ..Default::default() }).unwrap();
        println!(
            "MLMC var : N={:?} e_vs={:.3e} abs={:.3e} kappa_v={:.4e} cost={:.3} iters={} wall={:.1}s",
            var_run.n_l, var_run.achieved_evs.unwrap(), var_run.achieved_abs_var.unwrap(),
            var_run.kappa_v, var_run.total_cost, var_run.iterations, var_run.wall_seconds
        );
        let mc_mean = run_mc(&p, &scr, &targets, Estimand::Mean, &RunOptions { phase: 3, ..Default::default() }).unwrap();
        println!(
            "MC mean  : N={:?} e_s={:.3e} cost={:.3} wall={:.1}s",
            mc_mean.n_l, mc_mean.achieved_es.unwrap(), mc_mean.total_cost, mc_mean.wall_seconds
        );
        let mc_var = run_mc(&p, &scr, &targets, Estimand::Variance, &RunOptions { phase: 4, ..Default::default() }).unwrap();
        println!(
            "MC var   : N={:?} e_vs={:.3e} cost={:.3} wall={:.1}s",
            mc_var.n_l, mc_var.achieved_evs.unwrap(), mc_var.total_cost, mc_var.wall_seconds
        );
        println!(
            "speedups: mean {:.2}x var {:.2}x total {:.2}x | total wall {:.1} s",
            mc_mean.total_cost / mean_run.total_cost,
            mc_var.total_cost / var_run.total_cost,
            (mc_mean.total_cost + mc_var.total_cost) / (mean_run.total_cost + var_run.total_cost),
            t_start.elapsed().as_secs_f64()
        );
    }
}
