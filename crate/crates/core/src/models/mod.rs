//! Temporal dynamics models over action sequences and their decoders.

pub mod checkpoint;
pub mod decode;
pub mod ngram;
pub mod seq;

pub use decode::{predict, predict_topdown, Strategy};
pub use ngram::{train_ngram, NgramModel};
pub use seq::{train_seq_model, DecodeMode, OptimizerKind, SeqModel, SeqModelConfig, TrainExample};

use crate::error::Result;
use crate::taxonomy::ActionLabel;

/// What a model conditions on when asked for the next action.
#[derive(Debug, Clone, Copy)]
pub struct DecodeContext<'a> {
    pub observed: &'a [ActionLabel],
    /// `None` for bottom-up prediction.
    pub goal: Option<&'a str>,
}

/// A model that yields a joint next-step distribution over dense action
/// indices (`verb * num_nouns + noun`).
pub trait ActionModel {
    fn num_verbs(&self) -> usize;
    fn num_nouns(&self) -> usize;
    fn goal_conditioned(&self) -> bool;

    /// Distribution for the step following `generated`. Must sum to one.
    fn next_distribution(&self, ctx: &DecodeContext<'_>, generated: &[ActionLabel]) -> Result<Vec<f64>>;

    fn num_actions(&self) -> usize {
        self.num_verbs() * self.num_nouns()
    }

    fn action(&self, idx: usize) -> ActionLabel {
        ActionLabel::new(idx / self.num_nouns(), idx % self.num_nouns())
    }
}
