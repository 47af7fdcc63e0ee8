//! Loopback socket federation: every client runs on its own thread behind a
//! TCP connection, exchanging the same frames as the in-process path.
//!
//! Connection setup: each client dials in and sends a hello control frame
//! naming its id; the server indexes connections by that id. Each round the
//! server writes the broadcast to every client in id order, then reads one
//! update frame per client in id order; the round barrier is implicit in the
//! reads. A shutdown control frame ends each client loop.

use super::wire::{self, ControlHeader, ControlKind, Frame};
use super::{build_clients, training_loop, ClientState, RunSettings, TrainingOutcome};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::model::init_params;
use crate::rng::{domain, stream_id, SeededRng};
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;

fn send_frame(stream: &mut TcpStream, frame: &[u8]) -> Result<()> {
    stream.write_all(frame)?;
    stream.flush()?;
    Ok(())
}

/// Client loop: hello, then answer broadcasts until shutdown.
fn serve_client(mut client: ClientState, settings: &RunSettings, mut stream: TcpStream) -> Result<()> {
    let hello = wire::encode(&Frame::Control(ControlHeader {
        kind: ControlKind::Hello,
        client_id: client.id,
    }))?;
    send_frame(&mut stream, &hello)?;
    loop {
        let frame = wire::read_frame_bytes(&mut stream)?;
        match wire::decode(&frame)? {
            Frame::Broadcast { .. } => {
                let update = super::client_round_step(&mut client, &frame, settings)?;
                send_frame(&mut stream, &update)?;
            }
            Frame::Control(ControlHeader {
                kind: ControlKind::Shutdown,
                ..
            }) => return Ok(()),
            _ => return Err(Error::protocol("client expected a broadcast or shutdown")),
        }
    }
}

/// Accepts one connection per client and orders them by announced id.
fn accept_clients(listener: &TcpListener, k: usize) -> Result<Vec<TcpStream>> {
    let mut slots: Vec<Option<TcpStream>> = (0..k).map(|_| None).collect();
    for _ in 0..k {
        let (mut stream, _) = listener.accept()?;
        let Frame::Control(ControlHeader {
            kind: ControlKind::Hello,
            client_id,
        }) = wire::read_frame(&mut stream)?
        else {
            return Err(Error::protocol("expected a hello frame"));
        };
        let slot = slots
            .get_mut(client_id as usize)
            .ok_or_else(|| Error::protocol(format!("hello from unknown client {client_id}")))?;
        if slot.is_some() {
            return Err(Error::protocol(format!(
                "duplicate hello from client {client_id}"
            )));
        }
        *slot = Some(stream);
    }
    Ok(slots.into_iter().map(|s| s.unwrap()).collect())
}

fn shutdown_clients(streams: &mut [TcpStream]) {
    if let Ok(frame) = wire::encode(&Frame::Control(ControlHeader {
        kind: ControlKind::Shutdown,
        client_id: 0,
    })) {
        for stream in streams {
            // Best effort; a client that already failed has hung up.
            let _ = send_frame(stream, &frame);
        }
    }
}

fn join_clients(handles: Vec<JoinHandle<Result<()>>>) -> Option<Error> {
    let mut first = None;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => first = first.or(Some(e)),
            Err(_) => {
                first = first.or_else(|| Some(Error::protocol("client thread panicked")));
            }
        }
    }
    first
}

/// Runs a complete federated training job over loopback sockets. Produces
/// the same history, bit for bit, as [`super::run_training`] on the same
/// inputs.
pub fn run_training_loopback(
    settings: &RunSettings,
    shards: Vec<Vec<SampleRecord>>,
    validation: &[SampleRecord],
) -> Result<TrainingOutcome> {
    settings.validate()?;
    if validation.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut rng = SeededRng::new(settings.seed, stream_id(domain::MODEL_INIT, 0));
    let global = init_params(&settings.model, &mut rng)?;
    let clients = build_clients(shards, &global, settings)?;
    let n_total: u64 = clients.iter().map(|c| c.shard_len() as u64).sum();

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handles: Vec<JoinHandle<Result<()>>> = clients
        .into_iter()
        .map(|client| {
            let settings = settings.clone();
            std::thread::spawn(move || {
                let stream = TcpStream::connect(addr)?;
                serve_client(client, &settings, stream)
            })
        })
        .collect();

    let outcome = accept_clients(&listener, settings.federation.clients).and_then(|mut streams| {
        let result = training_loop(settings, n_total, validation, global, |broadcast| {
            for stream in streams.iter_mut() {
                send_frame(stream, broadcast)?;
            }
            streams
                .iter_mut()
                .map(wire::read_frame_bytes)
                .collect()
        });
        shutdown_clients(&mut streams);
        result
    });
    let client_error = join_clients(handles);
    match (outcome, client_error) {
        // A server-side read failure usually means a client died first;
        // that client's own error says why.
        (Err(_), Some(e)) => Err(e),
        (outcome, _) => outcome,
    }
}
