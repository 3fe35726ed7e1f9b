//! Small numeric helpers shared across modules.

/// Exactly rounded floating-point sum (Shewchuk's partials algorithm).
///
/// The result is the correctly rounded value of the true sum, so it does not
/// depend on the order of the inputs.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    round_partials(&partials)
}

// Rounds the non-overlapping partials (ascending magnitude) to a single double.
fn round_partials(partials: &[f64]) -> f64 {
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Half-way correction, as in CPython's math.fsum.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Arithmetic mean via [`exact_sum`]; `None` for an empty slice.
pub fn exact_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(exact_sum(values.iter().copied()) / values.len() as f64)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_order_independent() {
        let a = [1e16, 1.0, -1e16, 0.1, 0.2, 0.3];
        let mut b = a;
        b.reverse();
        assert_eq!(exact_sum(a), exact_sum(b));
        assert_eq!(exact_sum(a), 1.6);
    }

    #[test]
    fn exact_sum_of_tenths() {
        assert_eq!(exact_sum(std::iter::repeat_n(0.1, 10)), 1.0);
        assert_eq!(exact_sum(Vec::<f64>::new()), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(logit(0.3)) - 0.3).abs() < 1e-15);
    }
}
