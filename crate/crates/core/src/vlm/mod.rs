//! Prompt assembly for chat-completions vision models and recovery of
//! detections from their free-form replies.

mod messages;
mod parse;
mod replay;

pub use messages::{
    build_messages, ChatMessage, ContentPart, ImageUrl, IclExample, IclSupportSet, ImageInput, Role,
    ShotPolicy, VlmError,
};
pub use parse::{
    normalize_coords, parse_response, parse_response_with, serialize_detections, ParseOptions,
    ParseStatus, ParsedDetections, DEFAULT_CEILING,
};
pub use replay::{read_replay_log, ReplayEntry, ReplayError, ReplayLog, ReplayWriter};
