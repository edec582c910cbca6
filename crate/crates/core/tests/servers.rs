use std::thread;
use std::time::{Duration, Instant};

use grembed_core::server::client::{RetryPolicy, ServerClient};
use grembed_core::server::service::Server;
use grembed_core::server::state::{ServerState, Shard};

const DIM: usize = 32;
const ROWS: u64 = 64;

fn hammer(addr: String, rows: std::ops::Range<u64>, until: Instant) -> u64 {
    let mut c = ServerClient::connect(addr, RetryPolicy::default()).unwrap();
    let ids: Vec<u64> = rows.collect();
    let values = vec![0.25f32; ids.len() * DIM];
    let mut ops = 0;
    while Instant::now() < until {
        c.put(0, &ids, DIM, &values).unwrap();
        c.get(0, &ids).unwrap();
        ops += 2;
    }
    ops
}

fn throughput(addr: &str, clients: u64) -> f64 {
    let window = Duration::from_millis(500);
    let until = Instant::now() + window;
    let per = ROWS / clients;
    let handles: Vec<_> = (0..clients)
        .map(|k| {
            let addr = addr.to_string();
            thread::spawn(move || hammer(addr, k * per..(k + 1) * per, until))
        })
        .collect();
    let ops: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
    ops as f64 / window.as_secs_f64()
}

#[test]
fn disjoint_rows_scale_with_clients() {
    let cores = thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 4 {
        eprintln!("skipping: {cores} cpu(s), need 4 for a meaningful scaling check");
        return;
    }
    let state = ServerState::new(DIM, vec![Shard::initialized(0, 0..ROWS, DIM, 1)]);
    let server = Server::bind("127.0.0.1:0", state).unwrap().spawn().unwrap();
    let addr = server.addr.to_string();
    let one = throughput(&addr, 1);
    let four = throughput(&addr, 4);
    ServerClient::connect(addr, RetryPolicy::none()).unwrap().shutdown().unwrap();
    server.join().unwrap();
    assert!(four >= 2.0 * one, "1 client {one:.0} ops/s, 4 clients {four:.0} ops/s");
}

#[test]
fn shutdown_releases_the_port() {
    let state = ServerState::new(4, vec![Shard::initialized(0, 0..4, 4, 0)]);
    let server = Server::bind("127.0.0.1:0", state).unwrap().spawn().unwrap();
    let addr = server.addr;
    ServerClient::connect(addr.to_string(), RetryPolicy::none()).unwrap().shutdown().unwrap();
    server.join().unwrap();
    assert!(std::net::TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_err());
    // The address can be bound again right away.
    Server::bind(addr, ServerState::new(4, Vec::new())).unwrap();
}
