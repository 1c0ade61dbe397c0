//! Second-order Kerr infidelities against a dense cavity-only oracle.

use cavitybus::analysis::KerrCheckpoint;
use ndarray::{Array1, Array2};
use num_complex::Complex64 as C;

const N: usize = 90;

fn expm(a: &Array2<C>) -> Array2<C> {
    let norm = a.iter().map(|z| z.norm()).fold(0.0, f64::max) * N as f64;
    let squarings = norm.log2().ceil().max(0.0) as i32 + 1;
    let scaled = a.mapv(|z| z / 2f64.powi(squarings));
    let mut term = Array2::<C>::eye(N);
    let mut sum = term.clone();
    for k in 1..30 {
        term = term.dot(&scaled).mapv(|z| z / k as f64);
        sum = sum + &term;
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}

fn displace(alpha: f64) -> Array2<C> {
    let mut g = Array2::<C>::zeros((N, N));
    for k in 1..N {
        let s = (k as f64).sqrt() * alpha;
        g[[k, k - 1]] = C::new(s, 0.0);
        g[[k - 1, k]] = C::new(-s, 0.0);
    }
    expm(&g)
}

fn phase(f: impl Fn(f64) -> f64) -> Array2<C> {
    Array2::from_diag(&Array1::from_iter((0..N).map(|k| C::from_polar(1.0, f(k as f64)))))
}

/// Vacuum overlaps after steps (iv), (vi), (x) for the component that
/// rotates by `turns · π` per sideband period.
fn chain(nbar: f64, eps: f64, turns: f64, corrected: bool) -> [f64; 3] {
    let a = nbar.sqrt();
    let u = phase(|n| std::f64::consts::PI * turns * n + eps * n * n);
    let frame = |r2: f64| if corrected { phase(|n| -eps * (2.0 * r2 + 1.0) * n) } else { Array2::eye(N) };
    let (f1, f2) = (frame(nbar), frame(4.0 * nbar));
    let mut psi = Array1::<C>::zeros(N);
    psi[0] = C::new(1.0, 0.0);
    let vac = |v: &Array1<C>| v[0].norm_sqr();
    psi = displace(a).dot(&f1.dot(&u.dot(&displace(a).dot(&psi))));
    let iv = vac(&psi);
    psi = displace(-2.0 * a).dot(&f2.dot(&u.dot(&psi)));
    let vi = vac(&psi);
    psi = displace(a).dot(&f1.dot(&u.dot(&displace(-a).dot(&f2.dot(&u.dot(&psi))))));
    [iv, vi, vac(&psi)]
}

#[test]
fn closed_forms_match_dense_chain() {
    let eps = 1e-4;
    let checkpoints = [(KerrCheckpoint::Iv, [1.0, 3.0]), (KerrCheckpoint::Vi, [0.0, 2.0]), (KerrCheckpoint::X, [0.0, 1.0])];
    for corrected in [false, true] {
        for nbar in [1.0, 1.5, 2.0] {
            for (slot, (k, turns)) in checkpoints.iter().enumerate() {
                for t in turns {
                    let f = chain(nbar, eps, *t, corrected)[slot];
                    let got = (1.0 - f) / (eps * eps);
                    let want = k.coefficient(nbar, corrected);
                    assert!(
                        ((got - want) / want).abs() < 5e-3,
                        "{k:?} corrected={corrected} nbar={nbar} turns={t}: {got} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn uncorrected_step_vi_cubic_term() {
    let eps = 1e-4;
    let c = |nbar: f64| (1.0 - chain(nbar, eps, 0.0, false)[1]) / (eps * eps);
    let poly = |n: f64, x: f64| x * n.powi(3) + 158.0 * n * n + 9.0 * n;
    for n in [0.5, 1.0, 2.0] {
        assert!((c(n) - poly(n, 324.0)).abs() / poly(n, 324.0) < 2e-3, "nbar {n}: {}", c(n));
        assert!((c(n) - poly(n, 409.0)).abs() / poly(n, 409.0) > 0.1);
    }
}
