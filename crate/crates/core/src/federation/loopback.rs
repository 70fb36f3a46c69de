//! The federation over real sockets: one loopback TCP connection per client,
//! each client on its own thread, frames processed strictly in order.
//!
//! Per round the server sends `ServerWeights`, reads one `ClientUpdate` from
//! every connection in client-index order, aggregates, optionally sends a
//! `PruneDirective`, and closes the round with `RoundAck`. Closing the
//! connection ends the client.

use std::io::BufReader;
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::time::Instant;

use super::wire::{self, Message};
use super::{
    client_update, download, evaluate, prune_server, server_apply, server_average, ClientState,
    ExperimentResult, Federation, FederationConfig, RoundReport,
};
use crate::channel::SparseUpdate;
use crate::data::PartitionedDataset;
use crate::error::{Error, Result};
use crate::pruning;
use crate::tensor::DenseMatrix;

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        wire::write_message(&mut self.writer, msg)
    }

    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        use std::io::Write;
        self.writer.write_all(frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Message>> {
        wire::read_message(&mut self.reader)
    }
}

pub fn run_experiment(cfg: &FederationConfig, data: &PartitionedDataset) -> Result<ExperimentResult> {
    let start = Instant::now();
    let fed = Federation::new(cfg.clone(), data)?;
    let Federation {
        mut server, clients, ..
    } = fed;
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
    let addr = listener.local_addr()?;

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(clients.len());
        let mut connections = Vec::with_capacity(clients.len());
        // one client connects at a time, so accept order is client order
        for client in clients {
            handles.push(scope.spawn(move || run_client(addr, client, cfg)));
            let (stream, _) = listener.accept()?;
            connections.push(Connection::new(stream)?);
        }

        let served = serve(&mut server, &mut connections, cfg, data);
        drop(connections);
        let mut client_errors = Vec::new();
        for (k, h) in handles.into_iter().enumerate() {
            if let Err(e) = h.join().expect("client thread panicked") {
                client_errors.push((k, e));
            }
        }
        let reports = served?;
        if let Some((k, e)) = client_errors.into_iter().next() {
            return Err(Error::protocol(k, e.to_string()));
        }
        Ok(ExperimentResult {
            reports,
            total_seconds: start.elapsed().as_secs_f64(),
            server,
        })
    })
}

fn serve(
    server: &mut super::ServerState,
    connections: &mut [Connection],
    cfg: &FederationConfig,
    data: &PartitionedDataset,
) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::with_capacity(cfg.global_loops);
    for _ in 0..cfg.global_loops {
        let round_start = Instant::now();
        let frame = Message::server_weights(&server.model).encode();
        for conn in connections.iter_mut() {
            conn.send_frame(&frame)?;
        }

        let shapes: Vec<(usize, usize)> = server.model.weights().iter().map(DenseMatrix::shape).collect();
        let mut updates: Vec<SparseUpdate> = Vec::with_capacity(connections.len());
        for (k, conn) in connections.iter_mut().enumerate() {
            match conn.recv().map_err(|e| Error::protocol(k, e.to_string()))? {
                Some(Message::ClientUpdate(layers)) => updates.push(
                    wire::entries_to_update(&layers, &shapes).map_err(|e| Error::protocol(k, e.to_string()))?,
                ),
                Some(other) => {
                    return Err(Error::protocol(
                        k,
                        format!("expected ClientUpdate, got {:?}", other.message_type()),
                    ))
                }
                None => return Err(Error::protocol(k, "connection closed before update")),
            }
        }
        let upload_fractions = updates.iter().map(SparseUpdate::upload_fraction).collect();
        if cfg.algorithm.is_channel_based() {
            server_apply(server, &updates, cfg.decay)?;
        } else {
            server_average(server, &updates)?;
        }

        if let (true, Some(prune)) = (cfg.algorithm.prunes(), &cfg.prune) {
            if let Some(directive) = prune_server(server, prune, &data.validation)? {
                let msg = Message::prune_directive(&directive);
                for conn in connections.iter_mut() {
                    conn.send(&msg)?;
                }
            }
        }
        for conn in connections.iter_mut() {
            conn.send(&Message::RoundAck)?;
        }

        let (auc_roc, auc_pr) = evaluate(&server.model, &data.test)?;
        reports.push(RoundReport {
            round_index: server.round_index,
            upload_fractions,
            auc_roc,
            auc_pr,
            wall_seconds: round_start.elapsed().as_secs_f64(),
            neurons_left: server.model.hidden_neuron_count(),
        });
        server.round_index += 1;
    }
    Ok(reports)
}

fn run_client(addr: SocketAddr, mut client: ClientState, cfg: &FederationConfig) -> Result<()> {
    let mut conn = Connection::new(TcpStream::connect(addr)?)?;
    let mut round = 0;
    loop {
        match conn.recv()? {
            None => return Ok(()),
            Some(Message::ServerWeights(layers)) => {
                let (weights, biases) = wire::dense_layers_to_parameters(&layers)?;
                download(
                    &mut client.model,
                    &weights,
                    &biases,
                    cfg.download_rate,
                    cfg.seed,
                    round,
                    client.index,
                )?;
                let update = client_update(&mut client.model, &client.shard, cfg)?;
                conn.send(&Message::client_update(&update))?;
            }
            Some(Message::PruneDirective(layers)) => {
                pruning::apply_prune(&mut client.model, &wire::indices_to_directive(&layers))?;
            }
            Some(Message::RoundAck) => round += 1,
            Some(Message::ClientUpdate(_)) => {
                return Err(Error::Wire("client received a ClientUpdate frame".into()));
            }
        }
    }
}
