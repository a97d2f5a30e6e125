//! Densities tabulated on uniform one-dimensional grids.

use dakit_core::CoreError;

/// Quantile levels used by [`wasserstein_p_quantile`]: midpoints `(j + 1/2)/N`.
const QUANTILE_NODES: usize = 1024;

/// Relative tolerance on grid spacing uniformity.
const SPACING_TOL: f64 = 1e-9;

/// Absolute tolerance on the total mass `delta * sum(values)` against one.
const MASS_TOL: f64 = 1e-6;

/// A probability density tabulated at the centers of uniform cells.
///
/// Node `x_i` represents the cell `[x_i - delta/2, x_i + delta/2]` carrying
/// mass `values[i] * delta`. Construction checks that nodes are uniformly
/// spaced, values are nonnegative and finite, and the total mass is one to
/// within `1e-6`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    nodes: Vec<f64>,
    values: Vec<f64>,
    delta: f64,
}

impl GridDensity {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self, CoreError> {
        if nodes.len() < 2 {
            return Err(CoreError::Argument(
                "a grid density needs at least two nodes".into(),
            ));
        }
        if nodes.len() != values.len() {
            return Err(CoreError::Argument(format!(
                "node and value counts differ: {} vs {}",
                nodes.len(),
                values.len()
            )));
        }
        if nodes.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Argument("grid nodes must be finite".into()));
        }
        let delta = nodes[1] - nodes[0];
        if !(delta > 0.0) {
            return Err(CoreError::Argument(
                "grid nodes must be strictly increasing".into(),
            ));
        }
        for w in nodes.windows(2) {
            let gap = w[1] - w[0];
            if (gap - delta).abs() > SPACING_TOL * delta {
                return Err(CoreError::Argument(format!(
                    "grid spacing is not uniform: found gaps {delta} and {gap}"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Argument(
                "density values must be finite and nonnegative".into(),
            ));
        }
        let mass = delta * values.iter().sum::<f64>();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(CoreError::Argument(format!(
                "density mass on the grid is {mass}, expected 1 within {MASS_TOL}"
            )));
        }
        Ok(Self {
            nodes,
            values,
            delta,
        })
    }

    /// Tabulates `f` at the `n` cell centers of `[lo, hi]` split uniformly.
    pub fn on_regular_grid(
        lo: f64,
        hi: f64,
        n: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self, CoreError> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(CoreError::Argument(format!(
                "invalid grid window [{lo}, {hi}]"
            )));
        }
        if n < 2 {
            return Err(CoreError::Argument(
                "a grid density needs at least two cells".into(),
            ));
        }
        let delta = (hi - lo) / n as f64;
        let nodes: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * delta).collect();
        let values: Vec<f64> = nodes.iter().map(|&x| f(x)).collect();
        Self::new(nodes, values)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Total mass `delta * sum(values)`; one up to the construction tolerance.
    pub fn mass(&self) -> f64 {
        self.delta * self.values.iter().sum::<f64>()
    }
}

fn require_shared_grid(p: &GridDensity, q: &GridDensity) -> Result<(), CoreError> {
    if p.len() != q.len() {
        return Err(CoreError::Argument(format!(
            "pointwise grid metrics need a shared grid: {} vs {} nodes",
            p.len(),
            q.len()
        )));
    }
    let scale = p.delta;
    let aligned = (p.delta - q.delta).abs() <= SPACING_TOL * scale
        && p.nodes
            .iter()
            .zip(&q.nodes)
            .all(|(a, b)| (a - b).abs() <= SPACING_TOL * scale);
    if !aligned {
        return Err(CoreError::Argument(
            "pointwise grid metrics need a shared grid: node locations differ".into(),
        ));
    }
    Ok(())
}

/// Total variation distance `1/2 * integral |p - q|` by midpoint quadrature.
pub fn tv_grid(p: &GridDensity, q: &GridDensity) -> Result<f64, CoreError> {
    require_shared_grid(p, q)?;
    let sum: f64 = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * p.delta * sum)
}

/// Hellinger distance `sqrt(1/2 * integral (sqrt p - sqrt q)^2)`.
pub fn hellinger_grid(p: &GridDensity, q: &GridDensity) -> Result<f64, CoreError> {
    require_shared_grid(p, q)?;
    let sum: f64 = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok((0.5 * p.delta * sum).sqrt())
}

/// Cumulative masses at the `n + 1` cell edges, plus the left edge location.
fn edge_cdf(d: &GridDensity) -> (Vec<f64>, f64) {
    let mut cum = Vec::with_capacity(d.len() + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for v in &d.values {
        acc += v * d.delta;
        cum.push(acc);
    }
    (cum, d.nodes[0] - 0.5 * d.delta)
}

/// Inverts the piecewise-linear CDF at level `alpha` (0 < alpha < 1).
fn quantile(d: &GridDensity, cum: &[f64], left_edge: f64, alpha: f64) -> f64 {
    let total = cum[d.len()];
    let target = alpha * total;
    let idx = cum.partition_point(|c| *c < target).clamp(1, d.len());
    let cell = idx - 1;
    left_edge + cell as f64 * d.delta + (target - cum[cell]) / d.values[cell]
}

/// Wasserstein-p distance via quantile coupling.
///
/// Both CDFs are inverted at the 1024 midpoint levels `(j + 1/2)/1024` and the
/// distance is the p-norm average of the quantile gaps. The grids need not
/// coincide, but every cell must carry strictly positive density so the
/// quantile function is single valued.
pub fn wasserstein_p_quantile(
    p: &GridDensity,
    q: &GridDensity,
    pexp: f64,
) -> Result<f64, CoreError> {
    if !pexp.is_finite() || pexp < 1.0 {
        return Err(CoreError::Argument(format!(
            "wasserstein exponent must be a finite value >= 1, got {pexp}"
        )));
    }
    for d in [p, q] {
        if d.values.iter().any(|v| *v == 0.0) {
            return Err(CoreError::Domain(
                "quantile inversion needs strictly positive density in every cell; \
                 a zero-mass cell makes the quantile non-unique"
                    .into(),
            ));
        }
    }
    let (cum_p, lo_p) = edge_cdf(p);
    let (cum_q, lo_q) = edge_cdf(q);
    let mut acc = 0.0;
    for j in 0..QUANTILE_NODES {
        let alpha = (j as f64 + 0.5) / QUANTILE_NODES as f64;
        let xp = quantile(p, &cum_p, lo_p, alpha);
        let xq = quantile(q, &cum_q, lo_q, alpha);
        acc += (xp - xq).abs().powf(pexp);
    }
    Ok((acc / QUANTILE_NODES as f64).powf(1.0 / pexp))
}
