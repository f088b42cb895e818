//! Mining object tracks from per-frame proposals, discovering novel
//! categories by clustering track embeddings, evaluating the discovery, and
//! cutting auto-labeled detector training examples.

pub mod discovery;
pub mod eval;
pub mod geom;
pub mod io;
pub mod synth;
pub mod tracker;
pub mod trainset;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geom(#[from] geom::GeomError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Tracker(#[from] tracker::TrackerError),
    #[error(transparent)]
    Discovery(#[from] discovery::DiscoveryError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Trainset(#[from] trainset::TrainsetError),
}
