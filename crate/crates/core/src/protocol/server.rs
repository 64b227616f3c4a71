//! Newline-delimited JSON tool server and its client.
//!
//! Each request line is `{"scene_id": "...", "call": <tool_call payload>}`;
//! each response line is a `tool_response` payload. Responses are written in
//! request order. Failures of a single call are reported in its response and
//! the connection stays open.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{ToolCall, ToolInvocation, ToolResponse, ToolResult};
use crate::scene::{index_scenes, load_scene, Scene, SceneError};
use crate::tools::{DepthQuery, DepthSample, SamplingConfig, SpatialTools, ToolError};

pub const ERR_UNKNOWN_SCENE: &str = "unknown_scene";
pub const ERR_SCENE_LOAD: &str = "scene_load_failed";
pub const ERR_BAD_REQUEST: &str = "bad_request";
pub const ERR_INVALID_QUERY: &str = "invalid_query";
pub const ERR_PROVIDER: &str = "provider_failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolRequest {
    pub scene_id: String,
    pub call: ToolCall,
}

/// Dispatches tool calls against a corpus of scenes.
pub struct ToolServer {
    index: BTreeMap<String, PathBuf>,
    cache: Mutex<HashMap<String, Arc<Scene>>>,
    tools: SpatialTools,
    sampling: SamplingConfig,
}

impl ToolServer {
    /// Indexes the bundles below `root`; scenes are loaded on first use.
    pub fn open(root: &Path, tools: SpatialTools, sampling: SamplingConfig) -> Result<Self, SceneError> {
        Ok(Self { index: index_scenes(root)?, cache: Mutex::default(), tools, sampling })
    }

    pub fn from_scenes(scenes: Vec<Scene>, tools: SpatialTools, sampling: SamplingConfig) -> Self {
        let cache = scenes.into_iter().map(|s| (s.id().to_string(), Arc::new(s))).collect();
        Self { index: BTreeMap::new(), cache: Mutex::new(cache), tools, sampling }
    }

    fn scene(&self, id: &str) -> Result<Arc<Scene>, (&'static str, String)> {
        if let Some(s) = self.cache.lock().unwrap().get(id) {
            return Ok(Arc::clone(s));
        }
        let dir = self.index.get(id).ok_or_else(|| (ERR_UNKNOWN_SCENE, format!("no scene {id:?}")))?;
        let scene = Arc::new(load_scene(dir).map_err(|e| (ERR_SCENE_LOAD, e.to_string()))?);
        self.cache.lock().unwrap().insert(id.to_string(), Arc::clone(&scene));
        Ok(scene)
    }

    pub fn handle(&self, req: &ToolRequest) -> ToolResponse {
        let call_id = req.call.call_id.clone();
        let scene = match self.scene(&req.scene_id) {
            Ok(s) => s,
            Err((kind, msg)) => return ToolResponse::error(call_id, kind, msg),
        };
        match &req.call.invocation {
            ToolInvocation::CameraIntrinsics => {
                ToolResponse::ok(call_id, ToolResult::Intrinsics(self.tools.camera_intrinsics(&scene)))
            }
            ToolInvocation::DepthSampling { queries } => {
                match self.tools.depth_sampling(&scene, queries, &self.sampling) {
                    Ok(samples) => ToolResponse::ok(call_id, ToolResult::DepthSamples { samples }),
                    Err(e) => {
                        let kind = match e {
                            ToolError::Provider { .. } => ERR_PROVIDER,
                            _ => ERR_INVALID_QUERY,
                        };
                        ToolResponse::error(call_id, kind, e.to_string())
                    }
                }
            }
        }
    }

    /// Handles one request line and returns the response line without the
    /// trailing newline.
    pub fn handle_line(&self, line: &str) -> String {
        match serde_json::from_str::<ToolRequest>(line) {
            Ok(req) => serde_json::to_string(&self.handle(&req)).expect("response serializes"),
            Err(e) => {
                let call_id = serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v.pointer("/call/call_id").and_then(Value::as_str).map(str::to_string));
                let body = serde_json::json!({
                    "call_id": call_id,
                    "error": { "kind": ERR_BAD_REQUEST, "message": e.to_string() },
                });
                body.to_string()
            }
        }
    }

    /// Serves one connection until its input ends.
    pub fn serve_connection<R: BufRead, W: Write>(&self, reader: R, mut writer: W) -> io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = self.handle_line(&line);
            writer.write_all(resp.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(())
    }

    pub fn serve_stdio(&self) -> io::Result<()> {
        let stdin = io::stdin();
        let stdout = io::stdout();
        self.serve_connection(stdin.lock(), BufWriter::new(stdout.lock()))
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let server = Arc::clone(&self);
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                let result =
                    stream.try_clone().and_then(|r| server.serve_connection(BufReader::new(r), BufWriter::new(stream)));
                if let Err(e) = result {
                    log::warn!("connection {peer:?} closed with error: {e}");
                }
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("server closed the connection")]
    Closed,
    #[error("tool error {kind}: {message}")]
    Tool { kind: String, message: String },
}

/// Blocking client for a TCP tool server. Requests may be pipelined with
/// [`ToolClient::send`] and collected in order with [`ToolClient::recv`].
pub struct ToolClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
}

impl ToolClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream), next_id: 0 })
    }

    pub fn send(&mut self, req: &ToolRequest) -> Result<(), ClientError> {
        let line = serde_json::to_string(req).map_err(|e| ClientError::Malformed(e.to_string()))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<ToolResponse, ClientError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(ClientError::Closed);
        }
        serde_json::from_str(&line).map_err(|e| ClientError::Malformed(format!("{e}: {}", line.trim_end())))
    }

    pub fn call(&mut self, req: &ToolRequest) -> Result<ToolResponse, ClientError> {
        self.send(req)?;
        self.recv()
    }

    fn fresh_id(&mut self) -> String {
        self.next_id += 1;
        format!("c{}", self.next_id)
    }

    fn invoke(&mut self, scene_id: &str, invocation: ToolInvocation) -> Result<ToolResult, ClientError> {
        let call = ToolCall { call_id: self.fresh_id(), invocation };
        let resp = self.call(&ToolRequest { scene_id: scene_id.to_string(), call })?;
        match resp.outcome {
            super::ToolOutcome::Result(r) => Ok(r),
            super::ToolOutcome::Error(e) => Err(ClientError::Tool { kind: e.kind, message: e.message }),
        }
    }

    pub fn camera_intrinsics(&mut self, scene_id: &str) -> Result<crate::CameraIntrinsics, ClientError> {
        match self.invoke(scene_id, ToolInvocation::CameraIntrinsics)? {
            ToolResult::Intrinsics(k) => Ok(k),
            other => Err(ClientError::Malformed(format!("expected intrinsics, got {other:?}"))),
        }
    }

    pub fn depth_sampling(
        &mut self,
        scene_id: &str,
        queries: &[DepthQuery],
    ) -> Result<Vec<Vec<DepthSample>>, ClientError> {
        let inv = ToolInvocation::DepthSampling { queries: queries.to_vec() };
        match self.invoke(scene_id, inv)? {
            ToolResult::DepthSamples { samples } => Ok(samples),
            other => Err(ClientError::Malformed(format!("expected samples, got {other:?}"))),
        }
    }
}
