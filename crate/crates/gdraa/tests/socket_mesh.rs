//! The TCP transport against the in-process fabric: multi-endpoint meshes
//! must reproduce loopback results bit for bit, and the control planes must
//! carry the job protocol both ways.

use std::thread;
use std::time::Duration;

use gdraa::buffers::ElementWidth;
use gdraa::collectives::CollectiveKind;
use gdraa::collectives::param_server::server_rank;
use gdraa::harness::train::{loopback_allreduce_session, run_socket_session, SocketSessionArgs};
use gdraa::jobserver::{heartbeat_message, iter_start_message, worker_ready_message};
use gdraa::transport::socket::{bind_control_server, connect_control, ephemeral_addrs};
use gdraa::transport::{ControlKind, ControlPlane, NodeId};

fn socket_session(
    kind: CollectiveKind,
    workers: usize,
    elements: usize,
    width: ElementWidth,
    iterations: u64,
    seed: u64,
) -> Vec<Vec<(u64, String)>> {
    let endpoints = match kind {
        CollectiveKind::ParamServer => workers + 1,
        _ => workers,
    };
    let addrs = ephemeral_addrs(endpoints).unwrap();
    let mut handles = Vec::new();
    for rank in 0..endpoints as u32 {
        let args = SocketSessionArgs {
            kind,
            rank,
            workers,
            elements,
            width,
            iterations,
            seed,
            addrs: addrs.clone(),
        };
        handles.push(thread::spawn(move || run_socket_session(&args).unwrap()));
    }
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

/// Every strategy, run over real TCP streams, must produce exactly the
/// digests the in-process fabric produces — scheduling can reorder frame
/// arrivals but never the aggregation.
#[test]
fn socket_meshes_reproduce_loopback_digests() {
    for kind in CollectiveKind::ALL {
        let (workers, elements, iterations, seed) = (4usize, 96usize, 8u64, 13u64);
        let reference =
            loopback_allreduce_session(kind, workers, elements, ElementWidth::Eight, iterations, seed)
                .unwrap();
        let per_endpoint =
            socket_session(kind, workers, elements, ElementWidth::Eight, iterations, seed);

        for rank in 0..workers {
            let rows = &per_endpoint[rank];
            assert_eq!(rows.len(), iterations as usize, "{} rank {rank}", kind.as_str());
            for (i, (nu, digest)) in rows.iter().enumerate() {
                assert_eq!(*nu, reference[i].iteration);
                assert_eq!(
                    digest, &reference[i].digest,
                    "{} rank {rank} iteration {nu} differs from loopback",
                    kind.as_str()
                );
            }
        }
        if kind == CollectiveKind::ParamServer {
            // The server seat reports no digests of its own.
            assert!(per_endpoint[server_rank(workers) as usize].is_empty());
        }
    }
}

/// The narrow wire changes the arithmetic, not the agreement: socket and
/// loopback still match digest for digest.
#[test]
fn narrow_wire_sockets_match_loopback() {
    let (workers, elements, iterations, seed) = (3usize, 50usize, 5u64, 21u64);
    let reference = loopback_allreduce_session(
        CollectiveKind::Gdraa,
        workers,
        elements,
        ElementWidth::Four,
        iterations,
        seed,
    )
    .unwrap();
    let per_endpoint = socket_session(
        CollectiveKind::Gdraa,
        workers,
        elements,
        ElementWidth::Four,
        iterations,
        seed,
    );
    for rows in &per_endpoint {
        for (i, (_, digest)) in rows.iter().enumerate() {
            assert_eq!(digest, &reference[i].digest);
        }
    }
}

/// Control streams identify their clients by hello frame and carry the job
/// vocabulary in both directions.
#[test]
fn control_plane_round_trips_over_tcp() {
    let addr = ephemeral_addrs(1).unwrap()[0];
    let n = 3usize;

    let clients: Vec<_> = (0..n as u32)
        .map(|rank| {
            thread::spawn(move || {
                let mut client = connect_control(addr, NodeId::Worker(rank)).unwrap();
                client
                    .send_control(NodeId::JobServer, worker_ready_message(rank))
                    .unwrap();
                // Wait for the server's start signal, then answer with a
                // heartbeat carrying the same iteration.
                loop {
                    if let Some(msg) = client.recv_control(Some(Duration::from_millis(50))).unwrap()
                    {
                        assert_eq!(msg.kind, ControlKind::IterStart);
                        assert_eq!(msg.iteration, 7);
                        client
                            .send_control(NodeId::JobServer, heartbeat_message(rank, msg.iteration))
                            .unwrap();
                        return;
                    }
                }
            })
        })
        .collect();

    let mut server = bind_control_server(addr, n).unwrap();

    // The transport-level hello was consumed while accepting; what arrives
    // on the queue is each client's explicit ready message.
    let mut ready = 0;
    while ready < n {
        if let Some(msg) = server.recv_control(Some(Duration::from_millis(200))).unwrap() {
            if msg.kind == ControlKind::WorkerReady {
                ready += 1;
            }
        }
    }

    for rank in 0..n as u32 {
        server
            .send_control(NodeId::Worker(rank), iter_start_message(7))
            .unwrap();
    }

    let mut beats = 0;
    while beats < n {
        if let Some(msg) = server.recv_control(Some(Duration::from_millis(200))).unwrap() {
            if msg.kind == ControlKind::Heartbeat {
                assert_eq!(msg.iteration, 7);
                beats += 1;
            }
        }
    }

    for c in clients {
        c.join().unwrap();
    }
}
