use super::{Float, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitDist {
    Uniform,
    Gaussian,
}

/// Xavier/Glorot initialization: uniform on [−η, η] or Gaussian with
/// variance η², where η = gain·sqrt(6/(d_in+d_out)).
pub fn xavier_init<T: Float>(d_in: usize, d_out: usize, gain: f64, dist: InitDist, rng: &mut Rng) -> Tensor<T> {
    assert!(d_in >= 1 && d_out >= 1 && gain > 0.0, "xavier_init preconditions");
    let eta = xavier_bound(d_in, d_out, gain);
    let mut data = Vec::with_capacity(d_in * d_out);
    for _ in 0..d_in * d_out {
        let v = match dist {
            InitDist::Uniform => rng.uniform_in(-eta, eta),
            InitDist::Gaussian => eta * rng.gaussian(),
        };
        data.push(T::of(v));
    }
    Tensor::matrix(d_in, d_out, data).expect("sized")
}

pub fn xavier_bound(d_in: usize, d_out: usize, gain: f64) -> f64 {
    gain * (6.0 / (d_in + d_out) as f64).sqrt()
}

/// Depth-dependent gain a·L^b for an L-layer network.
pub fn depth_gain(a: f64, depth: usize, b: f64) -> f64 {
    a * (depth as f64).powf(b)
}

/// Position-dependent gain a/l^b for the sub-layer at depth l (1-based).
pub fn position_gain(a: f64, l: usize, b: f64) -> f64 {
    a / (l as f64).powf(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_bound_for_three_by_three() {
        assert!((xavier_bound(3, 3, 1.0) - 1.0).abs() < 1e-15);
        let w: Tensor<f64> = xavier_init(3, 3, 1.0, InitDist::Uniform, &mut Rng::new(0));
        assert!(w.data().iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn gains() {
        for depth in [1, 6, 48] {
            assert_eq!(depth_gain(1.0, depth, 0.0), 1.0);
        }
        assert_eq!(position_gain(2.0, 4, 1.0), 0.5);
    }

    #[test]
    fn gaussian_variance_matches_bound() {
        let w: Tensor<f64> = xavier_init(200, 300, 0.7, InitDist::Gaussian, &mut Rng::new(5));
        let eta = xavier_bound(200, 300, 0.7);
        let var = w.data().iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var / (eta * eta) - 1.0).abs() < 0.03, "{var} vs {}", eta * eta);
    }
}
