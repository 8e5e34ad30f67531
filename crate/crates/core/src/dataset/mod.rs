//! Bug records on disk, diff statistics and end-to-end validation.

pub mod diff;
pub mod record;
pub mod stats;
pub mod store;
pub mod validate;

pub use diff::{diff_stats, parse_diff, DiffStats, FileChange, FilePatch, Hunk, HunkLine, MalformedDiff};
pub use record::{BugRecord, ProblemStatement, StrategyKind, TrajectoryRecord, UnknownStrategy};
pub use stats::{corpus_stats, corpus_stats_with, record_stats, DatasetStats, StatsError};
pub use store::{fingerprint, read_collection, Collection, Dataset, DatasetStore, Manifest, StoreError};
pub use validate::{validate, validate_record, InvalidReason, RecordValidation, ValidationReport};
