//! Turning a parent candidate plus its feedback into a new candidate text.
//!
//! A [`Proposer`] renders the reflection prompt, calls a
//! [`ProposerBackend`] (HTTP chat endpoint, replay log, or scripted closure)
//! with retries on transport failure, and refines the raw response.

mod http;
mod prompt;
mod refine;
mod replay;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpChatBackend, HttpChatConfig, DEFAULT_API_KEY_ENV};
pub use prompt::{render_reflection_prompt, render_with_attachments, TEMPLATE_ID};
pub use refine::refine;
pub use replay::{RecordingBackend, ReplayBackend, ReplayEntry};

use crate::model::{CandidateId, ImageRef, SideInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchEntry {
    pub example_id: Option<String>,
    pub summary: String,
    pub score: f64,
    pub side_info: SideInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub candidate_id: CandidateId,
    pub aggregate: f64,
    pub text: String,
}

/// Everything the proposer sees for one mutation (or bootstrap) call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionContext {
    /// `None` only when bootstrapping a first candidate.
    pub parent_text: Option<String>,
    pub objective: Option<String>,
    pub background: Option<String>,
    pub minibatch: Vec<MinibatchEntry>,
    pub frontier_digest: Vec<FrontierEntry>,
}

impl ReflectionContext {
    pub fn bootstrap(objective: String, background: Option<String>) -> Self {
        Self {
            parent_text: None,
            objective: Some(objective),
            background,
            minibatch: Vec::new(),
            frontier_digest: Vec::new(),
        }
    }

    pub fn is_bootstrap(&self) -> bool {
        self.parent_text.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerResponse {
    pub raw_text: String,
    pub refined_text: String,
    pub refiner_applied: bool,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("HTTP status {0}: {1}")]
    Status(u16, String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Other(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProposerError {
    #[error("proposer backend failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: TransportError },
    #[error("proposer returned no usable artifact")]
    Empty { raw_text: String },
}

pub struct ProposalRequest<'a> {
    pub context: &'a ReflectionContext,
    pub prompt: &'a str,
    pub attachments: &'a [ImageRef],
}

pub trait ProposerBackend {
    /// Whether image attachments are forwarded to the model.
    fn supports_attachments(&self) -> bool {
        false
    }

    fn complete(&mut self, request: &ProposalRequest<'_>) -> Result<String, TransportError>;
}

impl<B: ProposerBackend + ?Sized> ProposerBackend for Box<B> {
    fn supports_attachments(&self) -> bool {
        (**self).supports_attachments()
    }

    fn complete(&mut self, request: &ProposalRequest<'_>) -> Result<String, TransportError> {
        (**self).complete(request)
    }
}

/// Offline backend driven by a closure over the reflection context.
pub struct ScriptedBackend<F>(pub F);

impl<F> ProposerBackend for ScriptedBackend<F>
where
    F: FnMut(&ReflectionContext) -> Result<String, TransportError>,
{
    fn complete(&mut self, request: &ProposalRequest<'_>) -> Result<String, TransportError> {
        (self.0)(request.context)
    }
}

pub struct Proposer {
    backend: Box<dyn ProposerBackend>,
    retries: u32,
}

impl Proposer {
    pub fn new(backend: Box<dyn ProposerBackend>, retries: u32) -> Self {
        Self { backend, retries }
    }

    pub fn scripted<F>(f: F) -> Self
    where
        F: FnMut(&ReflectionContext) -> Result<String, TransportError> + 'static,
    {
        Self::new(Box::new(ScriptedBackend(f)), 0)
    }

    pub fn propose(&mut self, ctx: &ReflectionContext) -> Result<ProposerResponse, ProposerError> {
        let (prompt, images) = render_with_attachments(ctx);
        let attachments: &[ImageRef] = if self.backend.supports_attachments() {
            &images
        } else {
            if !images.is_empty() {
                log::debug!(
                    "backend lacks attachment support; {} image(s) sent as placeholders",
                    images.len()
                );
            }
            &[]
        };
        let request = ProposalRequest {
            context: ctx,
            prompt: &prompt,
            attachments,
        };
        let mut attempts = 0;
        let raw_text = loop {
            attempts += 1;
            match self.backend.complete(&request) {
                Ok(text) => break text,
                Err(e) if attempts > self.retries => {
                    return Err(ProposerError::Transport { attempts, last: e });
                }
                Err(e) => log::warn!("proposer attempt {attempts} failed: {e}"),
            }
        };
        let refined_text = refine(&raw_text);
        if refined_text.is_empty() {
            return Err(ProposerError::Empty { raw_text });
        }
        let refiner_applied = refined_text != raw_text;
        if refiner_applied {
            log::debug!(
                "refiner reduced proposal from {} to {} bytes",
                raw_text.len(),
                refined_text.len()
            );
        }
        Ok(ProposerResponse {
            raw_text,
            refined_text,
            refiner_applied,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> ReflectionContext {
        ReflectionContext {
            parent_text: Some("p".into()),
            objective: None,
            background: None,
            minibatch: vec![],
            frontier_digest: vec![],
        }
    }

    #[test]
    fn scripted_pass_through() {
        let mut p = Proposer::scripted(|_| Ok("abc".into()));
        let r = p.propose(&ctx()).unwrap();
        assert_eq!(r.refined_text, "abc");
        assert!(!r.refiner_applied);
    }

    #[test]
    fn fenced_response_is_refined() {
        let mut p = Proposer::scripted(|_| Ok("```\nxyz\n```".into()));
        let r = p.propose(&ctx()).unwrap();
        assert_eq!(r.refined_text, "xyz");
        assert!(r.refiner_applied);
        assert_eq!(r.raw_text, "```\nxyz\n```");
    }

    #[test]
    fn whitespace_only_is_a_failure() {
        let mut p = Proposer::scripted(|_| Ok(" \n\t ".into()));
        assert!(matches!(p.propose(&ctx()), Err(ProposerError::Empty { .. })));
    }

    #[test]
    fn retries_cover_transient_failures() {
        let mut calls = 0;
        let backend = ScriptedBackend(move |_: &ReflectionContext| {
            calls += 1;
            if calls == 1 {
                Err(TransportError::Status(500, "oops".into()))
            } else {
                Ok("fine".into())
            }
        });
        let mut p = Proposer::new(Box::new(backend), 1);
        assert_eq!(p.propose(&ctx()).unwrap().refined_text, "fine");

        let mut p = Proposer::new(
            Box::new(ScriptedBackend(|_: &ReflectionContext| Err(TransportError::Timeout))),
            2,
        );
        assert_eq!(
            p.propose(&ctx()),
            Err(ProposerError::Transport {
                attempts: 3,
                last: TransportError::Timeout
            })
        );
    }
}
