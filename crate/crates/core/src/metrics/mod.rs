//! Evaluation metrics: edit distances, ED@Z and mean average precision.

pub mod edit;
pub mod lta;
pub mod map;

pub use edit::{damerau_levenshtein, damerau_levenshtein_full, edit_distance, levenshtein, EditVariant};
pub use lta::{
    ed_at_z, evaluate_lta, read_predictions, write_predictions, CandidateSet, Channel, EdOptions, EdReport, InstanceEd,
    Normalization,
};
pub use map::{average_precision, mean_ap, scores_by_class, MapReport};
