use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use crate::edge::frame::{read_frame, write_frame, Frame, FrameType};
use crate::edge::{code, error_payload, predict_feature};
use crate::entropy::bitstream::{digest_hex, Digest};
use crate::error::{Error, Result};
use crate::models::ModelBundle;

/// Worker thread cap from `EF_THREADS`, else the number of cores.
pub fn thread_cap() -> usize {
    std::env::var("EF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

struct Shared {
    bundle: ModelBundle,
    digest: Digest,
}

/// Counts live connection threads.
#[derive(Default)]
struct Slots {
    active: Mutex<usize>,
    freed: Condvar,
}

struct SlotGuard(Arc<Slots>);

impl Drop for SlotGuard {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_all();
    }
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    max_threads: usize,
    stop: Arc<AtomicBool>,
}

#[derive(Clone)]
pub struct ShutdownHandle {
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl ShutdownHandle {
    /// Stops accepting connections; open connections finish on their own.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, bundle: ModelBundle, max_threads: usize) -> Result<Self> {
        bundle.tables()?;
        let digest = bundle.digest();
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            shared: Arc::new(Shared { bundle, digest }),
            max_threads: max_threads.max(1),
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn digest(&self) -> Digest {
        self.shared.digest
    }

    pub fn shutdown_handle(&self) -> Result<ShutdownHandle> {
        Ok(ShutdownHandle { stop: self.stop.clone(), addr: self.local_addr()? })
    }

    /// Accept loop; returns after [`ShutdownHandle::shutdown`].
    pub fn run(self) -> Result<()> {
        let slots = Arc::new(Slots::default());
        loop {
            {
                let mut active = slots.active.lock().unwrap();
                while *active >= self.max_threads {
                    active = slots.freed.wait(active).unwrap();
                }
            }
            let (stream, _) = match self.listener.accept() {
                Ok(s) => s,
                Err(e) if self.stop.load(Ordering::SeqCst) => return Err(e.into()),
                Err(_) => continue,
            };
            if self.stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            *slots.active.lock().unwrap() += 1;
            let guard = SlotGuard(slots.clone());
            let shared = self.shared.clone();
            thread::spawn(move || {
                let _guard = guard;
                let _ = handle(stream, &shared);
            });
        }
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<(ShutdownHandle, thread::JoinHandle<Result<()>>)> {
        let h = self.shutdown_handle()?;
        Ok((h, thread::spawn(move || self.run())))
    }
}

/// Loads a student checkpoint and serves it until the process ends.
pub fn serve(addr: impl ToSocketAddrs, checkpoint: &Path) -> Result<()> {
    let bundle = ModelBundle::load(checkpoint)?;
    Server::bind(addr, bundle, thread_cap())?.run()
}

fn send_error(w: &mut TcpStream, code: u8, message: &str) -> Result<()> {
    write_frame(w, &Frame::new(FrameType::Error, error_payload(code, message)))
}

fn handle(stream: TcpStream, shared: &Shared) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut w = stream;
    let hello = match read_frame(&mut reader) {
        Ok(Some(f)) => f,
        Ok(None) => return Ok(()),
        Err(e) => return send_error(&mut w, code::PROTOCOL, &e.to_string()),
    };
    if hello.kind != FrameType::Hello {
        return send_error(&mut w, code::PROTOCOL, "expected HELLO");
    }
    if hello.payload != shared.digest {
        let msg = format!(
            "digest mismatch: server {}, client {}",
            digest_hex(&shared.digest),
            hello.payload.iter().map(|b| format!("{b:02x}")).collect::<String>()
        );
        return send_error(&mut w, code::DIGEST_MISMATCH, &msg);
    }
    write_frame(&mut w, &Frame::new(FrameType::Hello, shared.digest.to_vec()))?;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(Error::Io(e)) => return Err(e.into()),
            Err(e) => return send_error(&mut w, code::PROTOCOL, &e.to_string()),
        };
        match frame.kind {
            FrameType::Features => match predict_feature(&shared.bundle, &shared.digest, &frame.payload) {
                Ok(p) => write_frame(&mut w, &Frame::new(FrameType::Prediction, p.to_bytes()))?,
                Err(e) => send_error(&mut w, code::BAD_FEATURE, &e.to_string())?,
            },
            other => send_error(&mut w, code::PROTOCOL, &format!("unexpected {other:?} frame"))?,
        }
    }
}
