//! Blocking clients for one server and for a routed cluster of servers.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use log::warn;

use super::protocol::{Request, Response};
use super::routes::RouteTable;
use super::state::Stats;
use super::ServerError;
use crate::embed::Value;
use crate::graph::VertexRef;

/// Capped exponential backoff for transient connection failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial: Duration,
    pub max: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 8,
            initial: Duration::from_millis(20),
            max: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            attempts: 1,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.initial.saturating_mul(1 << attempt.min(16)).min(self.max)
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

pub struct ServerClient {
    addr: String,
    conn: Option<Conn>,
    retry: RetryPolicy,
}

impl ServerClient {
    /// Create a client; the connection is opened on first use.
    pub fn new(addr: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            addr: addr.into(),
            conn: None,
            retry,
        }
    }

    pub fn connect(addr: impl Into<String>, retry: RetryPolicy) -> Result<Self, ServerError> {
        let mut c = Self::new(addr, retry);
        if let Err(source) = c.ensure() {
            return Err(ServerError::Io { addr: c.addr, source });
        }
        Ok(c)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn ensure(&mut self) -> io::Result<&mut Conn> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.addr)?;
            stream.set_nodelay(true)?;
            self.conn = Some(Conn {
                reader: BufReader::new(stream.try_clone()?),
                writer: BufWriter::new(stream),
            });
        }
        Ok(self.conn.as_mut().expect("connection just opened"))
    }

    fn exchange_once(&mut self, frame: &[u8]) -> io::Result<Response> {
        let conn = self.ensure()?;
        conn.writer.write_all(frame)?;
        conn.writer.flush()?;
        Response::read_from(&mut conn.reader)
    }

    /// Send one request, reconnecting and retrying on I/O failure.
    ///
    /// A retried PUT is safe because writes are full-row overwrites.
    pub fn call(&mut self, req: &Request) -> Result<Response, ServerError> {
        let frame = req.encode();
        let mut attempt = 0;
        loop {
            match self.exchange_once(&frame) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    self.conn = None;
                    attempt += 1;
                    if attempt >= self.retry.attempts {
                        return Err(ServerError::Io {
                            addr: self.addr.clone(),
                            source: e,
                        });
                    }
                    let wait = self.retry.delay(attempt - 1);
                    warn!("{}: {e}; retrying in {wait:?}", self.addr);
                    thread::sleep(wait);
                }
            }
        }
    }

    fn remote(&self, message: String) -> ServerError {
        ServerError::Remote {
            addr: self.addr.clone(),
            message,
        }
    }

    pub fn get(&mut self, vtype: u8, ids: &[u64]) -> Result<(usize, Vec<Value>), ServerError> {
        let resp = self.call(&Request::Get {
            vtype,
            ids: ids.to_vec(),
        })?;
        let (n, dim, values) = resp.decode_rows().map_err(|m| self.remote(m))?;
        if n != ids.len() {
            return Err(self.remote(format!("asked for {} rows, got {n}", ids.len())));
        }
        Ok((dim, values))
    }

    /// Overwrite rows; returns the ids the server rejected.
    pub fn put(&mut self, vtype: u8, ids: &[u64], dim: usize, values: &[Value]) -> Result<Vec<u64>, ServerError> {
        let resp = self.call(&Request::Put {
            vtype,
            ids: ids.to_vec(),
            dim: dim as u32,
            values: values.to_vec(),
        })?;
        resp.decode_put_ack().map_err(|m| self.remote(m))
    }

    pub fn stats(&mut self) -> Result<Stats, ServerError> {
        let resp = self.call(&Request::Stats)?;
        resp.expect_ok().map_err(|m| self.remote(m))?;
        Ok(Stats::parse(&resp.message()))
    }

    pub fn shutdown(&mut self) -> Result<(), ServerError> {
        let resp = self.call(&Request::Shutdown)?;
        self.conn = None;
        resp.expect_ok().map_err(|m| self.remote(m))
    }
}

/// Routes row reads and writes to the servers that own them.
pub struct ClusterClient {
    routes: RouteTable,
    clients: Vec<ServerClient>,
    dim: usize,
}

impl ClusterClient {
    pub fn new(routes: RouteTable, dim: usize, retry: RetryPolicy) -> Self {
        let clients = routes.servers().iter().map(|a| ServerClient::new(a.clone(), retry)).collect();
        Self { routes, clients, dim }
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn group(&self, vtype: u8, ids: &[u64]) -> Result<Vec<Vec<usize>>, ServerError> {
        let mut by_server = vec![Vec::new(); self.clients.len()];
        for (i, &id) in ids.iter().enumerate() {
            let v = VertexRef::new(vtype, id);
            let s = self.routes.route(v).ok_or(ServerError::Unroutable(v))?;
            by_server[s].push(i);
        }
        Ok(by_server)
    }

    /// Rows for `ids` of one type, concatenated in request order. One GET per owning server.
    pub fn fetch_type(&mut self, vtype: u8, ids: &[u64]) -> Result<Vec<Value>, ServerError> {
        let dim = self.dim;
        let mut out = vec![0.0; ids.len() * dim];
        for (s, positions) in self.group(vtype, ids)?.into_iter().enumerate() {
            if positions.is_empty() {
                continue;
            }
            let sub: Vec<u64> = positions.iter().map(|&i| ids[i]).collect();
            let client = &mut self.clients[s];
            let (got_dim, values) = client.get(vtype, &sub)?;
            if got_dim != dim {
                return Err(client.remote(format!("server dimension {got_dim}, expected {dim}")));
            }
            for (k, &i) in positions.iter().enumerate() {
                out[i * dim..(i + 1) * dim].copy_from_slice(&values[k * dim..(k + 1) * dim]);
            }
        }
        Ok(out)
    }

    /// Overwrite rows of one type. One PUT per owning server. Returns rejected ids.
    pub fn store_type(&mut self, vtype: u8, ids: &[u64], values: &[Value]) -> Result<Vec<u64>, ServerError> {
        let dim = self.dim;
        if values.len() != ids.len() * dim {
            return Err(ServerError::DimMismatch {
                expected: ids.len() * dim,
                found: values.len(),
            });
        }
        let mut rejected = Vec::new();
        for (s, positions) in self.group(vtype, ids)?.into_iter().enumerate() {
            if positions.is_empty() {
                continue;
            }
            let sub: Vec<u64> = positions.iter().map(|&i| ids[i]).collect();
            let mut vals = Vec::with_capacity(sub.len() * dim);
            for &i in &positions {
                vals.extend_from_slice(&values[i * dim..(i + 1) * dim]);
            }
            rejected.extend(self.clients[s].put(vtype, &sub, dim, &vals)?);
        }
        Ok(rejected)
    }

    /// Summed counters over every server.
    pub fn stats(&mut self) -> Result<Stats, ServerError> {
        let mut total = Stats::default();
        for c in &mut self.clients {
            total = total + c.stats()?;
        }
        Ok(total)
    }

    pub fn shutdown_all(&mut self) -> Result<(), ServerError> {
        let mut first = None;
        for c in &mut self.clients {
            if let Err(e) = c.shutdown() {
                first.get_or_insert(e);
            }
        }
        first.map_or(Ok(()), Err)
    }
}
