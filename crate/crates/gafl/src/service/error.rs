use serde::Serialize;

/// Machine-readable error class, mapped onto an HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    Conflict,
    Invalid,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> u16 {
        match self {
            ErrorCode::BadRequest => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::Conflict => 409,
            ErrorCode::Invalid => 422,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
    /// The offending request field, for `invalid` errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    /// Ids the error is about: unknown videos, unlabeled clips and the like.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ids: Vec<String>,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), field: None, ids: Vec::new() }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }

    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: Some(field.into()), ..Self::new(ErrorCode::Invalid, message) }
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Self {
        self.ids = ids;
        self
    }

    /// A core configuration error, attributed to a field of `section` when
    /// the message starts with one.
    pub fn from_core(section: &str, err: gafl_core::Error) -> Self {
        use gafl_core::Error as E;
        match err {
            E::UnknownId(id) => Self::not_found(format!("unknown video {id}")).with_ids(vec![id]),
            E::Config(m) | E::Shape(m) | E::Precondition(m) | E::InsufficientData(m) | E::Degenerate(m) => {
                let lead: String = m.chars().take_while(|c| c.is_ascii_lowercase() || *c == '_').collect();
                let field = if lead.is_empty() || !m[lead.len()..].starts_with([' ', '·']) {
                    section.to_string()
                } else {
                    format!("{section}.{lead}")
                };
                Self::invalid(field, m)
            }
            E::NonFinite(m) => Self::internal(format!("numeric failure: {m}")),
        }
    }
}

impl From<crate::Error> for ServiceError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Core(c) => Self::from_core("request", c),
            crate::Error::Io { .. } => Self::internal(e.to_string()),
            crate::Error::Parse { .. } | crate::Error::Invalid(_) => Self::invalid("body", e.to_string()),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;
