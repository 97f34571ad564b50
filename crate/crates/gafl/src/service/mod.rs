//! The interactive service: datasets, annotation sessions and fine-tune jobs
//! over HTTP with JSON bodies.
//!
//! A session moves through `created → awaiting_annotations → finetuning →
//! ready | failed`. Its history is an append-only event log on disk, so a
//! restarted service comes back with every session intact. A job that was
//! running when the service stopped is marked failed.

pub mod error;
pub mod http;
pub mod session;
pub mod store;

pub use error::{ErrorCode, ServiceError, ServiceResult};
pub use http::{router, serve};
pub use session::{Event, JobStatus, Session, SessionState};
pub use store::{CreateSession, DatasetUpload, JobTicket, ServiceDefaults, Space, Store};
