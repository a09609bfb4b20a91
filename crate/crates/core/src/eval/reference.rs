//! Full-scale results for the two reference domains.
//!
//! These come from runs over 70K+ web images with production diffusion and
//! vision-language models. They are kept for comparison only; nothing at
//! desk scale is expected to reproduce them.

use serde::Serialize;

/// Correlation of appeal labels against one aesthetics baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BaselineCorrelation {
    pub baseline: &'static str,
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DomainReference {
    pub domain: &'static str,
    pub synthetic_images: usize,
    pub labeled_images: usize,
    /// Estimator MAE against the voted labels.
    pub estimator_mae: f64,
    /// Share of user-study responses preferring the enhanced image.
    pub enhancement_preference: f64,
    pub baselines: [BaselineCorrelation; 3],
}

const fn row(baseline: &'static str, plcc: f64, srcc: f64, krcc: f64, rmse: f64) -> BaselineCorrelation {
    BaselineCorrelation {
        baseline,
        plcc,
        srcc,
        krcc,
        rmse,
    }
}

pub const FOOD: DomainReference = DomainReference {
    domain: "food",
    synthetic_images: 18_000,
    labeled_images: 78_917,
    estimator_mae: 0.6756,
    enhancement_preference: 0.7653,
    baselines: [
        row("DIAA", 0.168, 0.162, 0.109, 6.463),
        row("MPADA", 0.005, -0.015, -0.009, 6.711),
        row("NIMA", 0.01, 0.003, 0.002, 2.009),
    ],
};

pub const ROOM: DomainReference = DomainReference {
    domain: "room",
    synthetic_images: 15_000,
    labeled_images: 75_287,
    estimator_mae: 0.6332,
    enhancement_preference: 0.8274,
    baselines: [
        row("DIAA", -0.123, -0.121, -0.082, 6.262),
        row("MPADA", -0.012, -0.017, -0.013, 5.899),
        row("NIMA", -0.147, -0.149, -0.098, 1.79),
    ],
};

pub fn reference(domain: &str) -> Option<&'static DomainReference> {
    [&FOOD, &ROOM].into_iter().find(|r| r.domain == domain)
}
