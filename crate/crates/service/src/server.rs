//! Serving daemon: one thread per connection, batches answered sample by
//! sample as each exit resolves them.

use std::collections::HashSet;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use layercache::engine::CacheEnabledModel;
use layercache::tensor::Tensor;

use crate::protocol::{read_frame, salvage_batch_id, send, FrameError, Request, Response, WireSample};

pub struct Server {
    listener: TcpListener,
    model: Arc<CacheEnabledModel>,
    report: Arc<serde_json::Value>,
    max_frame_bytes: usize,
    stop: Arc<AtomicBool>,
}

impl Server {
    /// `report` is returned verbatim to `report` requests.
    pub fn bind(
        addr: impl ToSocketAddrs,
        model: Arc<CacheEnabledModel>,
        report: serde_json::Value,
        max_frame_bytes: usize,
    ) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            model,
            report: Arc::new(report),
            max_frame_bytes,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the stop flag is raised.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let model = Arc::clone(&self.model);
            let report = Arc::clone(&self.report);
            let limit = self.max_frame_bytes;
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, &model, &report, limit) {
                    log::debug!("connection {peer:?} ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let thread = thread::spawn(move || {
            if let Err(e) = self.run() {
                log::error!("server stopped: {e}");
            }
        });
        Ok(ServerHandle { addr, stop, thread })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting; open connections finish on their own.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        let _ = self.thread.join();
    }
}

fn error(batch_id: Option<String>, message: impl Into<String>) -> Response {
    Response::Error {
        batch_id,
        message: message.into(),
    }
}

fn handle_connection(
    stream: TcpStream,
    model: &CacheEnabledModel,
    report: &serde_json::Value,
    limit: usize,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    loop {
        let bytes = match read_frame(&mut reader, limit) {
            Ok(Some(b)) => b,
            Ok(None) => return Ok(()),
            Err(FrameError::TooLarge { length, limit }) => {
                send(
                    &mut writer,
                    &error(None, format!("frame of {length} bytes exceeds the {limit}-byte limit")),
                )?;
                writer.shutdown(Shutdown::Both)?;
                return Ok(());
            }
            Err(FrameError::Io(e)) => return Err(e),
        };
        match serde_json::from_slice::<Request>(&bytes) {
            Err(e) => send(&mut writer, &error(salvage_batch_id(&bytes), format!("malformed request: {e}")))?,
            Ok(Request::Report) => send(
                &mut writer,
                &Response::Report {
                    report: report.clone(),
                },
            )?,
            Ok(Request::Infer { batch_id, samples }) => infer(&mut writer, model, batch_id, samples)?,
        }
    }
}

fn to_batch(model: &CacheEnabledModel, samples: &[WireSample]) -> Result<Tensor, String> {
    if samples.is_empty() {
        return Err("empty batch".into());
    }
    let shape = model.graph().input_shape();
    let width: usize = shape.iter().product();
    let mut seen = HashSet::new();
    let mut data = Vec::with_capacity(samples.len() * width);
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(format!("duplicate sample id `{}`", s.id));
        }
        if s.input.len() != width {
            return Err(format!(
                "sample `{}` has {} values, expected {width} for shape {shape:?}",
                s.id,
                s.input.len()
            ));
        }
        if s.input.iter().any(|v| !v.is_finite()) {
            return Err(format!("sample `{}` has non-finite values", s.id));
        }
        data.extend_from_slice(&s.input);
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data).map_err(|e| e.to_string())
}

fn infer(writer: &mut TcpStream, model: &CacheEnabledModel, batch_id: String, samples: Vec<WireSample>) -> io::Result<()> {
    let batch = match to_batch(model, &samples) {
        Ok(b) => b,
        Err(msg) => return send(writer, &error(Some(batch_id), msg)),
    };
    let ids: Vec<String> = samples.into_iter().map(|s| s.id).collect();
    let mut write_error = None;
    let result = model.infer_batch(&ids, &batch, |rec| {
        let msg = Response::Prediction {
            batch_id: batch_id.clone(),
            sample_id: rec.sample_id.clone(),
            class: rec.class,
            confidence: rec.confidence,
            exit: rec.exit.to_string(),
            path_flops: rec.path_flops,
        };
        send(writer, &msg).map_err(|e| {
            let text = e.to_string();
            write_error = Some(e);
            text
        })
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    match result {
        Ok(records) => send(
            writer,
            &Response::BatchDone {
                batch_id,
                count: records.len(),
            },
        ),
        Err(e) => send(writer, &error(Some(batch_id), e.to_string())),
    }
}
