use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

/// Two-sided exact (Clopper-Pearson) binomial confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialInterval {
    pub lower: f64,
    pub upper: f64,
}

impl BinomialInterval {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

pub fn clopper_pearson(successes: usize, trials: usize, confidence: f64) -> BinomialInterval {
    assert!(trials > 0 && successes <= trials);
    let alpha = 1.0 - confidence;
    let (x, n) = (successes as f64, trials as f64);
    let lower = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0).expect("valid shape").inverse_cdf(alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x).expect("valid shape").inverse_cdf(1.0 - alpha / 2.0)
    };
    BinomialInterval { lower, upper }
}
