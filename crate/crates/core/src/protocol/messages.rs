//! Wire messages: one JSON envelope per line.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Stage, StagedPrompts, TextPrompt};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Hello,
    Capabilities,
    GenerateRequest,
    GenerateResponse,
    PartialDenoiseRequest,
    PartialDenoiseResponse,
    VerifyRequest,
    VerifyResponse,
    GateRequest,
    GateResponse,
    DecomposeRequest,
    DecomposeResponse,
    Error,
    Shutdown,
}

impl Kind {
    /// The kind a worker answers this request with; `None` for messages
    /// that expect no answer.
    pub fn response(self) -> Option<Kind> {
        match self {
            Kind::GenerateRequest => Some(Kind::GenerateResponse),
            Kind::PartialDenoiseRequest => Some(Kind::PartialDenoiseResponse),
            Kind::VerifyRequest => Some(Kind::VerifyResponse),
            Kind::GateRequest => Some(Kind::GateResponse),
            Kind::DecomposeRequest => Some(Kind::DecomposeResponse),
            _ => None,
        }
    }

    pub fn is_request(self) -> bool {
        self.response().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_id: u64,
    pub kind: Kind,
    pub payload: Value,
}

impl Envelope {
    pub fn new<P: Serialize>(msg_id: u64, kind: Kind, payload: &P) -> Self {
        Envelope {
            msg_id,
            kind,
            payload: serde_json::to_value(payload).expect("payload types serialize to JSON"),
        }
    }

    /// Serialized line, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes to JSON")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub worker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilitiesPayload {
    pub supports_partial_denoise: bool,
    pub supports_branching: bool,
    pub deterministic: bool,
    pub cost_per_call: f64,
    #[serde(default)]
    pub verifier_ids: Vec<String>,
    #[serde(default)]
    pub supports_decompose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub parent: Option<String>,
    pub frame_index: usize,
    pub seed: u64,
    pub stage: Stage,
    pub prompt: TextPrompt,
    pub steps_per_frame: u32,
    pub steps: u32,
}

/// Resume point for a partially denoised frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialFrom {
    pub latent_ref: String,
    pub steps_done: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialDenoiseRequest {
    pub frame: GenerateRequest,
    pub from: Option<PartialFrom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResponse {
    pub latent_ref: String,
    pub denoise_progress: f64,
    pub steps_done: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifyRequest {
    Frame {
        verifier_id: String,
        latent_ref: String,
        parent: Option<String>,
        frame_index: usize,
        stage: Stage,
        prompt: TextPrompt,
    },
    Video {
        verifier_id: String,
        frames: Vec<String>,
        stages: Vec<Stage>,
        prompts: StagedPrompts,
    },
}

/// `null` stands for a non-finite score, which JSON cannot carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateRequest {
    pub latent_ref: String,
    pub denoise_progress: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResponse {
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeRequest {
    pub prompt: TextPrompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposeResponse {
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shutdown {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_are_snake_case() {
        let e = Envelope::new(3, Kind::PartialDenoiseRequest, &Shutdown {});
        assert_eq!(
            e.to_line(),
            r#"{"msg_id":3,"kind":"partial_denoise_request","payload":{}}"#
        );
    }

    #[test]
    fn every_request_has_a_response_kind() {
        for k in [
            Kind::GenerateRequest,
            Kind::PartialDenoiseRequest,
            Kind::VerifyRequest,
            Kind::GateRequest,
            Kind::DecomposeRequest,
        ] {
            assert!(k.is_request());
        }
        assert_eq!(Kind::Hello.response(), None);
        assert_eq!(Kind::Shutdown.response(), None);
    }

    #[test]
    fn verify_scope_is_tagged() {
        let r = VerifyRequest::Frame {
            verifier_id: "synthetic".into(),
            latent_ref: "a".into(),
            parent: None,
            frame_index: 0,
            stage: Stage::Initial,
            prompt: TextPrompt::new("p", "x"),
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["scope"], "frame");
        assert_eq!(serde_json::from_value::<VerifyRequest>(v).unwrap(), r);
    }
}
