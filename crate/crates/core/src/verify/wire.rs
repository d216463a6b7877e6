//! HTTP client for external verifiers.
//!
//! Native protocol: `POST` a JSON [`VerificationRequest`], receive a JSON
//! [`VerificationResponse`]. The OpenAI-compatible profile wraps the same
//! request in a chat-completions call and expects the response JSON as the
//! assistant message content.

use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::{GridJudgment, GridRequest, Judgment, ReformulationHint, Verdict, Verifier, VerifyError};
use crate::canvas::{compose_grid, CanvasSpec, TokenCanvas};
use crate::scene::{render, Color, Directive, ObjectType, Palette, Quotas, ScenePrompt, Shape};

/// Environment variable holding the bearer token for remote verifiers.
pub const TOKEN_ENV: &str = "GRIDAR_VERIFIER_TOKEN";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemoteError {
    #[error("verifier timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed verifier response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGeometry {
    pub width_px: usize,
    pub height_px: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationRequest {
    pub prompt: String,
    pub image_b64: String,
    pub image_format: ImageFormat,
    pub rows: usize,
    pub stage: u8,
    pub want_reformulation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_geometry: Option<CellGeometry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireQuota {
    pub color: Color,
    pub shape: Shape,
    pub count: u32,
}

/// Layout band in full-canvas latent rows, `[row_start, row_end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireDirective {
    pub row_start: usize,
    pub row_end: usize,
    pub objects: Vec<WireQuota>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationResponse {
    pub judgments: Vec<Judgment>,
    #[serde(default)]
    pub reformulated_prompt: Option<String>,
    #[serde(default)]
    pub directives: Option<Vec<WireDirective>>,
}

impl VerificationResponse {
    /// Strict parse: unknown fields, wrong types or a judgment count other
    /// than `rows` are errors.
    pub fn parse(body: &str, rows: usize) -> Result<Self, RemoteError> {
        let resp: Self =
            serde_json::from_str(body).map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
        if resp.judgments.len() != rows {
            return Err(RemoteError::MalformedResponse(format!(
                "expected {rows} judgments, got {}",
                resp.judgments.len()
            )));
        }
        Ok(resp)
    }

    /// Structured reformulation against `original`, when one was supplied.
    pub fn hint(&self, original: &ScenePrompt) -> Result<Option<ReformulationHint>, RemoteError> {
        let text = self.reformulated_prompt.clone().unwrap_or_default();
        let prompt = match &self.directives {
            Some(ds) if !ds.is_empty() => {
                let directives = ds
                    .iter()
                    .map(|d| {
                        if d.row_end <= d.row_start {
                            return Err(RemoteError::MalformedResponse(format!(
                                "empty band {}..{}",
                                d.row_start, d.row_end
                            )));
                        }
                        let quotas: Quotas =
                            d.objects.iter().map(|q| (ObjectType::new(q.color, q.shape), q.count)).collect();
                        Ok(Directive { rows: d.row_start..d.row_end, quotas })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Some(
                    original
                        .with_directives(directives)
                        .map_err(|e| RemoteError::MalformedResponse(e.to_string()))?,
                )
            }
            _ => text.parse::<ScenePrompt>().ok().filter(|p| p.has_directives()),
        };
        if text.is_empty() && prompt.is_none() {
            return Ok(None);
        }
        Ok(Some(ReformulationHint { text, prompt }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemoteProfile {
    Native,
    OpenAiChat {
        model: String,
        #[serde(default = "default_system_template")]
        system_template: String,
    },
}

pub fn default_system_template() -> String {
    "You check partial images for a text-to-image generator. The image is a grid of {rows} \
     horizontal cells stacked top to bottom; each cell shows the upper part of a different \
     candidate image for the same prompt. For each cell decide whether the candidate can still \
     be completed so that it satisfies the prompt. Answer \"impossible\" only when it can no \
     longer succeed, for example when an attribute binding is already wrong or more objects are \
     drawn than requested; objects that are simply not visible yet do not make a cell impossible. \
     Respond only with JSON of the form {\"judgments\": [\"possible\" or \"impossible\", one per \
     cell, top first], \"reformulated_prompt\": string or null, \"directives\": null}."
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub profile: RemoteProfile,
    pub image_format: ImageFormat,
    /// Send each cell as its own single-row request.
    pub per_cell: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/verify".into(),
            token: None,
            timeout_ms: 30_000,
            retries: 2,
            profile: RemoteProfile::Native,
            image_format: ImageFormat::Png,
            per_cell: false,
        }
    }
}

impl RemoteConfig {
    /// Fill a missing token from [`TOKEN_ENV`].
    pub fn with_env_token(mut self) -> Self {
        if self.token.is_none() {
            self.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        }
        self
    }
}

/// One raw request/response pair kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exchange {
    pub request: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct RemoteVerifier {
    config: RemoteConfig,
    palette: Palette,
    agent: ureq::Agent,
    exchanges: Mutex<Vec<Exchange>>,
}

impl RemoteVerifier {
    pub fn new(config: RemoteConfig, palette: Palette) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self { config, palette, agent, exchanges: Mutex::new(Vec::new()) }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.exchanges.lock().expect("exchange log poisoned").clone()
    }

    fn record(&self, ex: Exchange) {
        log::debug!("verifier exchange: {ex:?}");
        self.exchanges.lock().expect("exchange log poisoned").push(ex);
    }

    fn body_for(&self, request: &VerificationRequest) -> String {
        match &self.config.profile {
            RemoteProfile::Native => serde_json::to_string(request).expect("request serializes"),
            RemoteProfile::OpenAiChat { model, system_template } => {
                let mime = match request.image_format {
                    ImageFormat::Png => "image/png",
                    ImageFormat::Ppm => "image/x-portable-pixmap",
                };
                let user = format!(
                    "Prompt: {}\nGrid rows: {}\nStage: {}\nPropose a layout-specified reformulated prompt: {}",
                    request.prompt, request.rows, request.stage, request.want_reformulation
                );
                json!({
                    "model": model,
                    "temperature": 0,
                    "response_format": {"type": "json_object"},
                    "messages": [
                        {"role": "system", "content": system_template.replace("{rows}", &request.rows.to_string())},
                        {"role": "user", "content": [
                            {"type": "text", "text": user},
                            {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{}", request.image_b64)}}
                        ]}
                    ]
                })
                .to_string()
            }
        }
    }

    fn unwrap_body(&self, raw: &str) -> Result<String, RemoteError> {
        match &self.config.profile {
            RemoteProfile::Native => Ok(raw.to_string()),
            RemoteProfile::OpenAiChat { .. } => {
                let v: serde_json::Value =
                    serde_json::from_str(raw).map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
                v.pointer("/choices/0/message/content")
                    .and_then(|c| c.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| RemoteError::MalformedResponse("no choices[0].message.content".into()))
            }
        }
    }

    /// Send one request, retrying transport failures up to `retries` times.
    pub fn remote_verify(&self, request: &VerificationRequest) -> Result<VerificationResponse, RemoteError> {
        let body = self.body_for(request);
        let attempts = self.config.retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            let mut req = self.agent.post(&self.config.endpoint).set("Content-Type", "application/json");
            if let Some(token) = &self.config.token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            let err = match req.send_string(&body) {
                Ok(resp) => match resp.into_string() {
                    Ok(raw) => {
                        let parsed = self
                            .unwrap_body(&raw)
                            .and_then(|inner| VerificationResponse::parse(&inner, request.rows));
                        self.record(Exchange {
                            request: body.clone(),
                            response: Some(raw),
                            error: parsed.as_ref().err().map(ToString::to_string),
                        });
                        return parsed;
                    }
                    Err(e) => transport_error(&e, attempt),
                },
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    RemoteError::Transport { attempts: attempt, message: format!("HTTP {code}: {text}") }
                }
                Err(ureq::Error::Transport(t)) => {
                    let io = t.kind() == ureq::ErrorKind::Io;
                    if io && is_timeout(&t) {
                        RemoteError::Timeout { attempts: attempt }
                    } else {
                        RemoteError::Transport { attempts: attempt, message: t.to_string() }
                    }
                }
            };
            log::warn!("verifier attempt {attempt}/{attempts} failed: {err}");
            self.record(Exchange { request: body.clone(), response: None, error: Some(err.to_string()) });
            last = Some(err);
        }
        Err(last.expect("at least one attempt"))
    }

    fn encode(&self, canvas: &TokenCanvas) -> Result<String, VerifyError> {
        let img = render(canvas, &self.palette)?;
        let bytes = match self.config.image_format {
            ImageFormat::Png => img.to_png()?,
            ImageFormat::Ppm => img.to_ppm(),
        };
        Ok(BASE64.encode(bytes))
    }

    fn request_for(&self, grid: &GridRequest<'_>, canvas: &TokenCanvas, rows: usize) -> Result<VerificationRequest, VerifyError> {
        let spec = canvas.spec();
        Ok(VerificationRequest {
            prompt: grid.prompt.text_form(),
            image_b64: self.encode(canvas)?,
            image_format: self.config.image_format,
            rows,
            stage: grid.stage,
            want_reformulation: grid.want_reformulation,
            cell_geometry: Some(CellGeometry {
                width_px: spec.w * spec.tile_px,
                height_px: spec.h / rows * spec.tile_px,
            }),
        })
    }
}

fn transport_error(e: &std::io::Error, attempt: u32) -> RemoteError {
    if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
        RemoteError::Timeout { attempts: attempt }
    } else {
        RemoteError::Transport { attempts: attempt, message: e.to_string() }
    }
}

fn is_timeout(t: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(t);
    while let Some(s) = source {
        if let Some(io) = s.downcast_ref::<std::io::Error>() {
            return matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock);
        }
        source = s.source();
    }
    t.to_string().to_lowercase().contains("timed out")
}

impl Verifier for RemoteVerifier {
    fn verify(&self, grid: &GridRequest<'_>) -> Result<GridJudgment, VerifyError> {
        if !grid.canvas.is_full() {
            return Err(VerifyError::UnpopulatedCanvas {
                filled: grid.canvas.filled(),
                total: grid.canvas.spec().total(),
            });
        }
        let mut verdicts = Vec::with_capacity(grid.rows);
        let mut hint = None;
        if self.config.per_cell {
            for i in 0..grid.rows {
                let cell = grid.cell(i);
                let spec = CanvasSpec { h: cell.visible_rows, ..cell.spec };
                let canvas = compose_grid(&[cell.tokens.to_vec()], &spec)?;
                let resp = self.remote_verify(&self.request_for(grid, &canvas, 1)?)?;
                verdicts.push(to_verdict(i, resp.judgments[0]));
                if hint.is_none() {
                    hint = resp.hint(grid.prompt)?;
                }
            }
        } else {
            let resp = self.remote_verify(&self.request_for(grid, grid.canvas, grid.rows)?)?;
            verdicts.extend(resp.judgments.iter().enumerate().map(|(i, &j)| to_verdict(i, j)));
            hint = resp.hint(grid.prompt)?;
        }
        Ok(GridJudgment { verdicts, hint })
    }
}

fn to_verdict(i: usize, j: Judgment) -> Verdict {
    Verdict { candidate_index: i, judgment: j, reason: None }
}
