//! Exit codes and the mapping from error chains onto them.

use placevalue::model::ModelError;
use placevalue::remote::RemoteError;
use placevalue::train::TrainError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_REMOTE: i32 = 4;

/// Invalid arguments, config values or input content.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

/// An input produced by an earlier step is missing.
#[derive(Debug, thiserror::Error)]
#[error("{path} not found; create it with `{hint}`")]
pub struct MissingArtifact {
    pub path: String,
    pub hint: String,
}

/// Remote endpoint failures that are not tied to one test case.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct RemoteFailure(pub String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<MissingArtifact>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if cause.is::<RemoteFailure>() {
            return EXIT_REMOTE;
        }
        if let Some(e) = cause.downcast_ref::<RemoteError>() {
            return match e {
                RemoteError::Io(_) => EXIT_IO,
                RemoteError::InvalidConfig(_)
                | RemoteError::Format(_)
                | RemoteError::Transcript { .. } => EXIT_VALIDATION,
                RemoteError::MissingToken(_) => EXIT_REMOTE,
            };
        }
        if let Some(ModelError::Malformed(_)) = cause.downcast_ref::<ModelError>() {
            return EXIT_IO;
        }
        if let Some(TrainError::Optim { .. }) = cause.downcast_ref::<TrainError>() {
            return EXIT_FAILURE;
        }
    }
    // Everything else stems from arguments or input data that failed a check.
    EXIT_VALIDATION
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn codes_follow_the_chain() {
        let io: anyhow::Error = Err::<(), _>(std::io::Error::other("disk"))
            .context("writing report")
            .unwrap_err();
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&Usage("bad".into()).into()), EXIT_VALIDATION);
        assert_eq!(exit_code(&RemoteFailure("down".into()).into()), EXIT_REMOTE);
        let missing = MissingArtifact {
            path: "runs/data/add-test.tsv".into(),
            hint: "placevalue generate --op add".into(),
        };
        assert_eq!(exit_code(&missing.into()), EXIT_IO);
    }
}
