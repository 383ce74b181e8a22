use super::{NumericsError, Tensor};

/// Central-difference gradient `(f(x+h) − f(x−h)) / 2h` per coordinate.
///
/// `f` must return a single-element tensor.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor, NumericsError>
where
    F: FnMut(&Tensor) -> Result<Tensor, NumericsError>,
{
    finite_diff_coords(&mut f, x, h, 0..x.len()).map(|g| {
        Tensor::new(x.shape().to_vec(), g).expect("gradient has the input's length")
    })
}

/// Central differences for a subset of coordinates; entries outside
/// `coords` are left at zero.
pub fn finite_diff_coords<F, I>(
    f: &mut F,
    x: &Tensor,
    h: f64,
    coords: I,
) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&Tensor) -> Result<Tensor, NumericsError>,
    I: IntoIterator<Item = usize>,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in coords {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?.item()?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?.item()?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain difference norm when both
/// vectors are below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
