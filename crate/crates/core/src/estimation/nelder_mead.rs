//! Box-constrained Nelder–Mead simplex minimiser.
//!
//! Trial points are projected onto the box, so every evaluated point is
//! feasible.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Converged once every vertex lies within this distance (per
    /// coordinate) of the best vertex.
    pub x_tolerance: f64,
    /// Initial simplex edge length per coordinate.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            x_tolerance: 1e-5,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult<const N: usize> {
    pub x: [f64; N],
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn project<const N: usize>(x: &mut [f64; N], lower: &[f64; N], upper: &[f64; N]) {
    for j in 0..N {
        x[j] = x[j].clamp(lower[j], upper[j]);
    }
}

fn affine<const N: usize>(a: &[f64; N], b: &[f64; N], t: f64) -> [f64; N] {
    // a + t (b - a)
    std::array::from_fn(|j| a[j] + t * (b[j] - a[j]))
}

/// Minimise `f` over the box `[lower, upper]` starting from `start`.
///
/// Non-finite objective values are treated as `+inf`.
pub fn minimize<const N: usize>(
    mut f: impl FnMut(&[f64; N]) -> f64,
    start: [f64; N],
    lower: [f64; N],
    upper: [f64; N],
    opts: &NelderMeadOptions,
) -> NelderMeadResult<N> {
    let mut eval = |x: &[f64; N]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut x0 = start;
    project(&mut x0, &lower, &upper);
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, eval(&x0)));
    for j in 0..N {
        let mut v = x0;
        // step away from the nearer bound so the vertex stays distinct
        let step = opts.initial_step;
        v[j] = if v[j] + step <= upper[j] {
            v[j] + step
        } else {
            v[j] - step
        };
        project(&mut v, &lower, &upper);
        simplex.push((v, eval(&v)));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].0;
        let spread = simplex[1..]
            .iter()
            .flat_map(|(v, _)| (0..N).map(move |j| (v[j] - best[j]).abs()))
            .fold(0.0, f64::max);
        if spread < opts.x_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: [f64; N] =
            std::array::from_fn(|j| simplex[..N].iter().map(|(v, _)| v[j]).sum::<f64>() / N as f64);
        let (worst, f_worst) = simplex[N];
        let f_best = simplex[0].1;
        let f_second = simplex[N - 1].1;

        let mut reflected = affine(&centroid, &worst, -REFLECT);
        project(&mut reflected, &lower, &upper);
        let f_reflected = eval(&reflected);

        if f_reflected < f_best {
            let mut expanded = affine(&centroid, &worst, -EXPAND);
            project(&mut expanded, &lower, &upper);
            let f_expanded = eval(&expanded);
            simplex[N] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
            continue;
        }
        if f_reflected < f_second {
            simplex[N] = (reflected, f_reflected);
            continue;
        }
        // contraction, outside if the reflection improved on the worst
        let (towards, f_towards) = if f_reflected < f_worst {
            (reflected, f_reflected)
        } else {
            (worst, f_worst)
        };
        let contracted = affine(&centroid, &towards, CONTRACT);
        let f_contracted = eval(&contracted);
        if f_contracted <= f_towards {
            simplex[N] = (contracted, f_contracted);
            continue;
        }
        for vertex in simplex.iter_mut().skip(1) {
            let v = affine(&best, &vertex.0, SHRINK);
            *vertex = (v, eval(&v));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NelderMeadResult {
        x: simplex[0].0,
        f: simplex[0].1,
        iterations,
        converged,
    }
}
