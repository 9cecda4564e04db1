//! The fast invariant suite behind `simlmc validate`: dispersion
//! calibration, SPD sampling, FEM patch and uniaxial tests, the
//! h-statistic enumeration oracles and the allocation closed form.

use nalgebra::Matrix3;
use simlmc::fem::{neumann_load_vector, solve_constrained};
use simlmc::field::{build_kle, draw};
use simlmc::material::{
    delta_c_from_delta_t, delta_t_from_delta_c, sample_c_field, FluctuationSampler,
    MeanElasticity,
};
use simlmc::mesh::{build_plate_hierarchy, Mesh2D};
use simlmc::mlmc::allocate;
use simlmc::stats::{cov_of_h2_pair, h2, var_of_h2};

use crate::config::ExperimentConfig;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

pub fn run_all(cfg: &ExperimentConfig) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    // dispersion relation round trip on the configured mean
    let mean = match cfg.mean_elasticity() {
        Ok(m) => m,
        Err(e) => {
            out.push(check("dispersion-round-trip", false, e.to_string()));
            return out;
        }
    };
    match delta_t_from_delta_c(cfg.material.delta_c, &mean) {
        Ok(dt) => {
            let back = delta_c_from_delta_t(dt, &mean);
            let err = (back - cfg.material.delta_c).abs();
            out.push(check(
                "dispersion-round-trip",
                err <= 1e-14,
                format!("delta_T = {dt:.6}, round-trip error {err:.2e}"),
            ));
            out.push(identity_mean_check());
            out.push(spd_sampling_check(cfg, &mean, dt));
        }
        Err(e) => out.push(check("dispersion-round-trip", false, e.to_string())),
    }

    out.push(patch_test_check(&mean.c_bar));
    out.push(uniaxial_check());
    out.push(h2_enumeration_check());
    out.push(var_cov_enumeration_check());
    out.push(allocation_check());
    out
}

fn identity_mean_check() -> CheckOutcome {
    let identity = MeanElasticity::from_matrix(Matrix3::identity()).expect("identity is SPD");
    match delta_t_from_delta_c(0.1f64, &identity) {
        Ok(dt) => check(
            "identity-mean-delta",
            (dt - 0.1).abs() <= 1e-14,
            format!("delta_T = {dt}"),
        ),
        Err(e) => check("identity-mean-delta", false, e.to_string()),
    }
}

fn spd_sampling_check(
    cfg: &ExperimentConfig,
    mean: &MeanElasticity<f64>,
    delta_t: f64,
) -> CheckOutcome {
    let name = "spd-sampling";
    let h = match build_plate_hierarchy::<f64>(7.0, 21.7, 2, 6, 1) {
        Ok(h) => h,
        Err(e) => return check(name, false, e.to_string()),
    };
    let kernel = match cfg.kernel() {
        Ok(k) => k,
        Err(e) => return check(name, false, e.to_string()),
    };
    let order = cfg.material.kle_modes.min(h.finest().n_nodes());
    let basis = match build_kle(&kernel, h.finest(), order) {
        Ok(b) => b,
        Err(e) => return check(name, false, e.to_string()),
    };
    let sampler = match FluctuationSampler::new(delta_t) {
        Ok(s) => s,
        Err(e) => return check(name, false, e.to_string()),
    };
    let pts = [[1.0, 2.0], [3.5, 10.85], [6.0, 20.0]];
    let n = 500u64;
    let mut all_spd = true;
    let mut mean_acc = Matrix3::<f64>::zeros();
    for s in 0..n {
        let d = draw::<f64>(777, s, order);
        match sample_c_field(mean, &sampler, &basis, &d, &pts) {
            Ok(cs) => {
                for c in cs {
                    all_spd &= nalgebra::Cholesky::new(c).is_some();
                    mean_acc += c / (3.0 * n as f64);
                }
            }
            Err(e) => return check(name, false, e.to_string()),
        }
    }
    let drift = (mean_acc - mean.c_bar).amax() / mean.c_bar.amax();
    check(
        name,
        all_spd && drift < 0.05,
        format!("{n} samples x 3 points all SPD, mean drift {drift:.3}"),
    )
}

fn patch_test_check(c: &Matrix3<f64>) -> CheckOutcome {
    let nodes = vec![
        [0.0, 0.0],
        [1.1, 0.0],
        [2.0, 0.0],
        [0.0, 0.9],
        [1.05, 1.1],
        [2.0, 1.0],
        [0.0, 2.0],
        [0.95, 2.0],
        [2.0, 2.0],
    ];
    let mesh = Mesh2D {
        level: 0,
        nodes: nodes.clone(),
        elements: vec![[0, 1, 4, 3], [1, 2, 5, 4], [3, 4, 7, 6], [4, 5, 8, 7]],
        dirichlet_nodes: vec![],
        neumann_edges: vec![],
    };
    let exact = |p: &[f64; 2]| [3e-4 * p[0] - 1e-4 * p[1], 2e-4 * p[0] + 4e-4 * p[1]];
    let mut fixed = Vec::new();
    for (i, p) in nodes.iter().enumerate() {
        if i != 4 {
            let u = exact(p);
            fixed.push((2 * i, u[0]));
            fixed.push((2 * i + 1, u[1]));
        }
    }
    match solve_constrained(&mesh, &vec![*c; 16], &fixed, &vec![0.0; 18]) {
        Ok(u) => {
            let want = exact(&nodes[4]);
            let err = (u[8] - want[0]).abs().max((u[9] - want[1]).abs());
            check("fem-patch-test", err <= 1e-10, format!("error {err:.2e}"))
        }
        Err(e) => check("fem-patch-test", false, e.to_string()),
    }
}

fn uniaxial_check() -> CheckOutcome {
    let name = "fem-uniaxial";
    let h = match build_plate_hierarchy::<f64>(7.0, 21.7, 2, 6, 1) {
        Ok(h) => h,
        Err(e) => return check(name, false, e.to_string()),
    };
    let plate = &h.meshes[1];
    let iso = MeanElasticity::isotropic(1e6, 0.3).expect("valid constants");
    let mut fixed = Vec::new();
    for (i, nd) in plate.nodes.iter().enumerate() {
        if nd[1] == 0.0 {
            fixed.push((2 * i + 1, 0.0));
            if nd[0] == 0.0 {
                fixed.push((2 * i, 0.0));
            }
        }
    }
    let load = neumann_load_vector(plate, 100.0 * 7.0);
    match solve_constrained(plate, &vec![iso.c_bar; 4 * plate.n_elements()], &fixed, &load) {
        Ok(u) => {
            let exact = -100.0 * 21.7 / 1e6;
            let mut worst = 0.0f64;
            for (i, nd) in plate.nodes.iter().enumerate() {
                if nd[1] == 21.7 {
                    worst = worst.max((u[2 * i + 1] - exact).abs() / exact.abs());
                }
            }
            check(name, worst <= 1e-8, format!("relative error {worst:.2e}"))
        }
        Err(e) => check(name, false, e.to_string()),
    }
}

fn h2_enumeration_check() -> CheckOutcome {
    let pop = [0.0, 1.0, 2.0];
    let mut total = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let vals = [pop[a], pop[b], pop[c]];
                let s1: f64 = vals.iter().sum();
                let s2: f64 = vals.iter().map(|v| v * v).sum();
                total += h2(s1, s2, 3).expect("n = 3");
            }
        }
    }
    let bias = (total / 27.0 - 2.0 / 3.0).abs();
    check(
        "h2-unbiased-enumeration",
        bias <= 1e-12,
        format!("bias {bias:.2e}"),
    )
}

fn var_cov_enumeration_check() -> CheckOutcome {
    // {0,1} population, n = 4
    let n = 4usize;
    let mut s = 0.0;
    let mut sq = 0.0;
    let count = 1usize << n;
    for mask in 0..count {
        let s1 = (mask as u32).count_ones() as f64;
        let v = h2(s1, s1, n as u64).expect("n = 4");
        s += v;
        sq += v * v;
    }
    let cf = count as f64;
    let var_enum = sq / cf - (s / cf).powi(2);
    let closed = var_of_h2(0.25, 1.0 / 16.0, n as u64).expect("n = 4");
    let err_var = (var_enum - closed).abs();
    // identical-pair covariance reduces to the variance
    let cov = cov_of_h2_pair(1.0 / 16.0, 0.25, 0.25, 0.25, n as u64).expect("n = 4");
    let err_cov = (cov - closed).abs();
    check(
        "varh2-cov-enumeration",
        err_var <= 1e-12 && err_cov <= 1e-12,
        format!("Var err {err_var:.2e}, degenerate Cov err {err_cov:.2e}"),
    )
}

fn allocation_check() -> CheckOutcome {
    let plan = allocate(&[4.0, 1.0], &[1.0, 4.0], 0.1, 2);
    let ok = plan.n_l == vec![80, 20];
    check(
        "allocation-closed-form",
        ok,
        format!("N = {:?} (want [80, 20])", plan.n_l),
    )
}
