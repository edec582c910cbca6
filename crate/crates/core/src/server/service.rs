//! TCP front end for a [`ServerState`]: one thread per client connection.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use super::protocol::{read_frame, Request, Response};
use super::state::ServerState;

pub struct Server {
    listener: TcpListener,
    state: Arc<ServerState>,
    stopping: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, state: ServerState) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            state: Arc::new(state),
            stopping: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> Arc<ServerState> {
        Arc::clone(&self.state)
    }

    /// Accept connections until a SHUTDOWN request arrives.
    pub fn serve(self) -> io::Result<()> {
        let local = self.listener.local_addr()?;
        for conn in self.listener.incoming() {
            if self.stopping.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let state = Arc::clone(&self.state);
            let stopping = Arc::clone(&self.stopping);
            thread::spawn(move || {
                if let Err(e) = handle(stream, &state, &stopping, local) {
                    debug!("connection closed: {e}");
                }
            });
        }
        Ok(())
    }

    /// Run [`Server::serve`] on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let state = self.state();
        let thread = thread::Builder::new().name(format!("ps-{addr}")).spawn(move || self.serve())?;
        Ok(ServerHandle { addr, state, thread })
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<ServerState>,
    thread: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    /// Wait for the accept loop to exit (after a SHUTDOWN request).
    pub fn join(self) -> io::Result<()> {
        self.thread.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked")))
    }
}

fn handle(stream: TcpStream, state: &ServerState, stopping: &AtomicBool, local: SocketAddr) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let body = match read_frame(&mut reader) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let (response, shutdown) = match body {
            Err(len) => {
                state.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
                (Response::error(format!("frame of {len} bytes exceeds limit")), false)
            }
            Ok(body) => match Request::decode(&body) {
                Err(msg) => {
                    state.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
                    (Response::error(format!("protocol error: {msg}")), false)
                }
                Ok(req) => dispatch(state, req),
            },
        };
        response.write_to(&mut writer)?;
        writer.flush()?;
        if shutdown {
            stopping.store(true, Ordering::SeqCst);
            // Wake the accept loop so it observes the flag.
            let _ = TcpStream::connect(local);
            return Ok(());
        }
    }
}

fn dispatch(state: &ServerState, req: Request) -> (Response, bool) {
    match req {
        Request::Get { vtype, ids } => match state.get_rows(vtype, &ids) {
            Ok(values) => (Response::rows(ids.len(), state.dim(), &values), false),
            Err(e) => (Response::error(e.to_string()), false),
        },
        Request::Put { vtype, ids, dim, values } => {
            if dim as usize != state.dim() {
                state.counters.put_requests.fetch_add(1, Ordering::Relaxed);
                return (
                    Response::error(format!("dimension mismatch: server holds {}, request has {dim}", state.dim())),
                    false,
                );
            }
            match state.put_rows(vtype, &ids, &values) {
                Ok(rejected) => (Response::put_ack(&rejected), false),
                Err(e) => (Response::error(e.to_string()), false),
            }
        }
        Request::Stats => {
            state.counters.stats_requests.fetch_add(1, Ordering::Relaxed);
            (Response::ok(state.stats_text().into_bytes()), false)
        }
        Request::Shutdown => (Response::ok(Vec::new()), true),
    }
}
