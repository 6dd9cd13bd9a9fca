use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_lab::backward::{bsde_duality_check, bsvie_duality_check, BsdeSpec, LinearBsde, LinearMBsvie};
use volterra_lab::cones::DenseMatrix;
use volterra_lab::lattice::{AdaptedProcess, BinaryLattice, TerminalField};

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
}

/// Random linear M-solution equations (n = 2, N = 8) against the adjoint
/// Volterra recursion.
#[test]
fn linear_msolution_duality_holds_on_random_data() {
    let lattice = BinaryLattice::new(1.0, 8).unwrap();
    let n = 2;
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (a0, a1, c) = (random_matrix(&mut rng, n), random_matrix(&mut rng, n), random_matrix(&mut rng, n));
        let psi: Vec<f64> = (0..9 * lattice.leaf_count() * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let free_term = TerminalField::from_fn(&lattice, n, |i, leaf, out| {
            let at = (i * lattice.leaf_count() + leaf.path as usize) * n;
            out.copy_from_slice(&psi[at..at + n]);
        });
        let equation = LinearMBsvie {
            dim: n,
            free_term,
            kernel: Arc::new(move |t, s, _| a0.add(&a1.scale(s - t)).unwrap()),
            zeta_matrix: Arc::new(move |t, _| c.scale(1.0 + t)),
        };
        let eta = AdaptedProcess::from_fn(&lattice, n, |node, out| {
            for (d, o) in out.iter_mut().enumerate() {
                *o = (node.path as f64 * 0.37 + d as f64 + node.level as f64).sin();
            }
        });
        let gap = bsvie_duality_check(&equation, &eta, &lattice).unwrap();
        assert!(gap <= 1e-8, "trial {trial}: duality gap {gap:e}");
    }
}

#[test]
fn bsde_duality_holds_from_every_start_level() {
    let lattice = BinaryLattice::new(1.0, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_matrix(&mut rng, 2);
    let b = DenseMatrix::from_diagonal(&[0.4, -0.7]);
    let terminal: Vec<f64> = (0..lattice.leaf_count() * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coefficients = LinearBsde {
        drift_matrix: Arc::new(move |t, _| a.scale(1.0 - t)),
        z_matrix: Arc::new(move |_, _| b.clone()),
        forcing: Arc::new(|t, node, out| {
            out[0] = t + node.path as f64 * 0.01;
            out[1] = -t;
        }),
    };
    let spec = BsdeSpec::linear(2, terminal, coefficients, &lattice);
    for start in 0..6 {
        let gap = bsde_duality_check(&spec, &[0.3, -1.2], start, &lattice).unwrap();
        assert!(gap <= 1e-10, "start {start}: {gap:e}");
    }
}
