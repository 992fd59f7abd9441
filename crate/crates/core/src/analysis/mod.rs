//! Analysis instruments: the word/position score expansion, positional
//! heatmaps, Toeplitz factorization and subspace diagnostics.

mod decompose;
mod heatmap;
mod subspace;
mod toeplitz;

pub use decompose::{decompose_terms, encoder_scores, item_terms, CorrelationReport, HeadTerms, TermStats, TERM_NAMES};
pub use heatmap::{export_positional_heatmaps, parse_csv, parse_pgm, positional_heatmaps, to_csv, to_pgm};
pub use subspace::{
    diagonal_deviation, numerical_rank, singular_values, subspace_diagnostics, toeplitz_distance, toeplitz_projection,
    HeadSubspace, SubspaceReport, RANK_THRESHOLD,
};
pub use toeplitz::{
    dense_eigenvalues, embed_circulant, factorize_toeplitz, max_matched_distance, toeplitz, ToeplitzFactorization,
    RECONSTRUCTION_TOLERANCE,
};
