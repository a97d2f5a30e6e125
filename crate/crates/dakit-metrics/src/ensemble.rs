//! Sample-based distance estimators and sample-set serialization.

use std::io::{Read, Write};

use dakit_core::{CoreError, Ensemble};
use nalgebra::DVector;

/// Positive-definite kernels (and one conditionally negative definite one)
/// for maximum mean discrepancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `exp(-|u - v|^2 / (2 bandwidth^2))`.
    Gaussian { bandwidth: f64 },
    /// `u . v`.
    Linear,
    /// `-|u - v|`; with this kernel the squared MMD equals the squared
    /// energy distance.
    NegDistance,
}

impl Kernel {
    fn validate(&self) -> Result<(), CoreError> {
        if let Kernel::Gaussian { bandwidth } = self {
            if !bandwidth.is_finite() || *bandwidth <= 0.0 {
                return Err(CoreError::Argument(format!(
                    "kernel bandwidth must be positive and finite, got {bandwidth}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn eval(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        match *self {
            Kernel::Gaussian { bandwidth } => {
                (-dist_sq(u, v) / (2.0 * bandwidth * bandwidth)).exp()
            }
            Kernel::Linear => u.dot(v),
            Kernel::NegDistance => -dist_sq(u, v).sqrt(),
        }
    }
}

#[inline]
fn dist_sq(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    u.iter()
        .zip(v.iter())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// Off-diagonal kernel mean `2/(N(N-1)) sum_{i<j} k(e_i, e_j)`.
fn within_mean(e: &Ensemble, kernel: Kernel) -> f64 {
    let n = e.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += kernel.eval(e.member(i), e.member(j));
        }
    }
    2.0 * acc / (n * (n - 1)) as f64
}

/// Full kernel mean `1/(Nx Ny) sum_{i,j} k(x_i, y_j)`, diagonal included.
fn cross_mean(x: &Ensemble, y: &Ensemble, kernel: Kernel) -> f64 {
    let mut acc = 0.0;
    for u in x.iter() {
        for v in y.iter() {
            acc += kernel.eval(u, v);
        }
    }
    acc / (x.len() * y.len()) as f64
}

/// Squared maximum mean discrepancy between two ensembles.
///
/// The within-sample averages omit the diagonal (so they are unbiased for the
/// population kernel mean), while the cross average runs over all pairs; the
/// mixed convention is deliberate. Both ensembles need at least two members.
/// The value can be slightly negative for close distributions.
pub fn mmd_sq_ensemble(x: &Ensemble, y: &Ensemble, kernel: Kernel) -> Result<f64, CoreError> {
    kernel.validate()?;
    require_same_dim(x, y)?;
    if x.len() < 2 || y.len() < 2 {
        return Err(CoreError::Argument(
            "the unbiased within-sample terms need at least two members per ensemble".into(),
        ));
    }
    Ok(within_mean(x, kernel) + within_mean(y, kernel) - 2.0 * cross_mean(x, y, kernel))
}

/// Squared energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between ensembles.
///
/// Equals [`mmd_sq_ensemble`] with the [`Kernel::NegDistance`] kernel when
/// both ensembles have two or more members; a singleton contributes a zero
/// within-sample term instead of failing.
pub fn energy_dist_sq_ensemble(x: &Ensemble, y: &Ensemble) -> Result<f64, CoreError> {
    require_same_dim(x, y)?;
    let kernel = Kernel::NegDistance;
    let wx = if x.len() >= 2 {
        within_mean(x, kernel)
    } else {
        0.0
    };
    let wy = if y.len() >= 2 {
        within_mean(y, kernel)
    } else {
        0.0
    };
    Ok(wx + wy - 2.0 * cross_mean(x, y, kernel))
}

fn require_same_dim(x: &Ensemble, y: &Ensemble) -> Result<(), CoreError> {
    if x.dim() != y.dim() {
        return Err(CoreError::Argument(format!(
            "ensemble dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Wasserstein-1 distance between two one-dimensional empirical measures.
///
/// For equal sizes this is the mean gap between sorted samples. For unequal
/// sizes the quantile functions are piecewise constant with breakpoints at
/// `i/Nx` and `j/Ny`; the integral of their gap is accumulated segment by
/// segment over the merged breakpoints.
pub fn wasserstein1_empirical_1d(x: &Ensemble, y: &Ensemble) -> Result<f64, CoreError> {
    if x.dim() != 1 || y.dim() != 1 {
        return Err(CoreError::Argument(format!(
            "empirical Wasserstein is one-dimensional; got dims {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let mut xs: Vec<f64> = x.iter().map(|v| v[0]).collect();
    let mut ys: Vec<f64> = y.iter().map(|v| v[0]).collect();
    xs.sort_unstable_by(f64::total_cmp);
    ys.sort_unstable_by(f64::total_cmp);
    let (nx, ny) = (xs.len(), ys.len());
    if nx == ny {
        let sum: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).sum();
        return Ok(sum / nx as f64);
    }
    // Breakpoints compared exactly as integers scaled by nx*ny.
    let scale = (nx * ny) as f64;
    let (mut ix, mut iy) = (0usize, 0usize);
    let mut level = 0usize;
    let mut total = 0.0;
    while ix < nx && iy < ny {
        let bx = (ix + 1) * ny;
        let by = (iy + 1) * nx;
        let next = bx.min(by);
        total += ((next - level) as f64 / scale) * (xs[ix] - ys[iy]).abs();
        if bx == next {
            ix += 1;
        }
        if by == next {
            iy += 1;
        }
        level = next;
    }
    Ok(total)
}

/// Reads a headerless CSV with one sample per row into an ensemble.
pub fn read_sample_set_csv<R: Read>(r: R) -> Result<Ensemble, CoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(r);
    let mut members = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let mut entries = Vec::with_capacity(record.len());
        for field in record.iter() {
            let value: f64 = field.trim().parse().map_err(|_| {
                CoreError::Format(format!(
                    "sample row {row}: cannot parse {field:?} as a float"
                ))
            })?;
            entries.push(value);
        }
        members.push(DVector::from_vec(entries));
    }
    Ensemble::new(members)
}

/// Writes an ensemble as a headerless CSV, one sample per row.
///
/// Floats are written with the shortest representation that round-trips, so
/// read-back is bit exact.
pub fn write_sample_set_csv<W: Write>(w: W, e: &Ensemble) -> Result<(), CoreError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for member in e.iter() {
        let row: Vec<String> = member.iter().map(|v| v.to_string()).collect();
        writer.write_record(&row)?;
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}
