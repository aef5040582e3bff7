use thiserror::Error;

use crate::engine::SimTime;
use crate::ids::{ThreadId, TileId};
use crate::tile::TileStatus;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at {requested} when the clock is already at {now}")]
    PastTime { now: SimTime, requested: SimTime },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("snapshot for thread {snapshot} applied to thread {target}")]
    ThreadMismatch { target: ThreadId, snapshot: ThreadId },

    #[error("tile {actor} attempted to write validation memory owned by {owner}")]
    NonOwnerWrite { owner: TileId, actor: TileId },

    #[error("illegal status transition on {tile}: {from:?} -> {to:?}")]
    IllegalTransition {
        tile: TileId,
        from: TileStatus,
        to: TileStatus,
    },

    #[error("command rejected for {tile}: {reason}")]
    CommandRejected { tile: TileId, reason: String },

    #[error("unknown {kind} `{id}`")]
    Unknown { kind: &'static str, id: String },
}
