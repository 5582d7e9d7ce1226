//! Optional multi-process mode: the controller and learner nodes exchange
//! the round-loop messages as newline-delimited JSON over TCP. The
//! in-process engine is the semantic reference; a distributed run must
//! produce bit-identical round records.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{fedavg_weights, performance_weights, weighted_average};
use crate::data::{LabeledDataset, LearnerShard};
use crate::error::{Error, Result};
use crate::federation::{client_opt, derive_seed, FederationConfig, RoundRecord};
use crate::metrics::{accumulate, evaluate, ConfusionMatrix};
use crate::nn::{init_params, Architecture, ModelParams};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// One protocol message. Responses echo the `(round, learner_id)` of their
/// request; in an `EvalRequest` the `learner_id` names the owner of the
/// model being evaluated (the evaluator is implied by the connection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Message {
    TrainRequest { round: usize, learner_id: usize, model: ModelParams },
    TrainResponse { round: usize, learner_id: usize, model: ModelParams },
    EvalRequest { round: usize, learner_id: usize, model: ModelParams },
    EvalResponse { round: usize, learner_id: usize, cm: ConfusionMatrix },
    Shutdown,
}

/// One line of UTF-8 JSON terminated by a newline. `f64` payloads use the
/// shortest decimal that round-trips, so models survive bit-exactly.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(msg).expect("messages always serialize");
    bytes.push(b'\n');
    bytes
}

/// Inverse of [`encode`] for one complete line.
pub fn decode(line: &[u8]) -> Result<Message> {
    serde_json::from_slice(line).map_err(|e| Error::Protocol(e.to_string()))
}

fn send(stream: &mut TcpStream, msg: &Message) -> Result<()> {
    stream.write_all(&encode(msg)).map_err(|e| Error::Transport(format!("send failed: {e}")))
}

fn receive(reader: &mut BufReader<TcpStream>) -> Result<Message> {
    let mut line = String::new();
    let n = reader
        .read_line(&mut line)
        .map_err(|e| Error::Transport(format!("receive failed: {e}")))?;
    if n == 0 {
        return Err(Error::Transport("connection closed mid-round".into()));
    }
    decode(line.as_bytes())
}

/// A learner process: trains on its own shard and evaluates received models
/// against its own validation set. Single request at a time.
pub struct LearnerNode {
    pub learner_id: usize,
    pub shard: LearnerShard,
    pub config: FederationConfig,
}

impl LearnerNode {
    fn handle(&self, msg: Message) -> Result<Option<Message>> {
        match msg {
            Message::TrainRequest { round, learner_id, model } => {
                if learner_id != self.learner_id {
                    return Err(Error::Protocol(format!(
                        "train request for learner {learner_id} sent to learner {}",
                        self.learner_id
                    )));
                }
                let trained = client_opt(
                    &model,
                    &self.shard,
                    self.config.local_epochs,
                    self.config.batch_size,
                    self.config.learning_rate,
                    derive_seed(self.config.master_seed, self.learner_id as u64, round as u64),
                )?;
                Ok(Some(Message::TrainResponse { round, learner_id, model: trained }))
            }
            Message::EvalRequest { round, learner_id, model } => {
                let cm = match &self.shard.validation {
                    Some(v) if !v.is_empty() => evaluate(&model, v)?,
                    _ => ConfusionMatrix::zero(model.arch.num_classes),
                };
                Ok(Some(Message::EvalResponse { round, learner_id, cm }))
            }
            Message::Shutdown => Ok(None),
            other => Err(Error::Protocol(format!("unexpected message at learner: {other:?}"))),
        }
    }

    /// Serve one controller connection until Shutdown.
    pub fn serve(&self, listener: TcpListener) -> Result<()> {
        let (stream, _) =
            listener.accept().map_err(|e| Error::Transport(format!("accept failed: {e}")))?;
        let mut writer =
            stream.try_clone().map_err(|e| Error::Transport(format!("clone failed: {e}")))?;
        let mut reader = BufReader::new(stream);
        loop {
            let msg = receive(&mut reader)?;
            match self.handle(msg)? {
                Some(response) => send_stream(&mut writer, &response)?,
                None => return Ok(()),
            }
        }
    }
}

fn send_stream(stream: &mut TcpStream, msg: &Message) -> Result<()> {
    send(stream, msg)
}

struct Connection {
    endpoint: String,
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Connection {
    fn open(endpoint: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(endpoint)
            .map_err(|e| Error::Transport(format!("cannot reach learner at {endpoint}: {e}")))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .map_err(|e| Error::Transport(format!("{endpoint}: {e}")))?;
        let writer =
            stream.try_clone().map_err(|e| Error::Transport(format!("{endpoint}: {e}")))?;
        Ok(Self { endpoint: endpoint.to_string(), writer, reader: BufReader::new(stream) })
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        send(&mut self.writer, msg).map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))
    }

    fn receive(&mut self) -> Result<Message> {
        receive(&mut self.reader).map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))
    }
}

/// Drive a full federation over the wire. Endpoint k hosts learner k; the
/// controller keeps the shards only for their sizes and the validation
/// emptiness checks, all training and evaluation happens at the learners.
///
/// Semantics-preserving: round records are bit-identical to
/// [`run_federation`](crate::federation::run_federation) under the same
/// config and seeds.
pub fn run_distributed(
    config: &FederationConfig,
    shards: &[LearnerShard],
    test_set: &LabeledDataset,
    endpoints: &[String],
    timeout: Duration,
) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    if !config.exclusion_ids.is_empty() {
        return Err(Error::Config("distributed mode does not support exclusion".into()));
    }
    if endpoints.len() != config.n_learners || shards.len() != config.n_learners {
        return Err(Error::Config(format!(
            "{} endpoints and {} shards for {} learners",
            endpoints.len(),
            shards.len(),
            config.n_learners
        )));
    }
    let score_kind = config.score_kind();
    if score_kind.is_some()
        && shards.iter().all(|s| s.validation.as_ref().is_none_or(|v| v.is_empty()))
    {
        return Err(Error::Config(
            "performance weighting requires nonempty validation sets".into(),
        ));
    }

    let mut conns: Vec<Connection> =
        endpoints.iter().map(|e| Connection::open(e, timeout)).collect::<Result<_>>()?;

    let arch =
        Architecture::new(test_set.num_features(), config.hidden.clone(), test_set.num_classes())?;
    let mut community = init_params(&arch, config.master_seed);
    let mut records = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        for (k, conn) in conns.iter_mut().enumerate() {
            conn.send(&Message::TrainRequest { round, learner_id: k, model: community.clone() })?;
        }
        let mut locals = Vec::with_capacity(conns.len());
        for (k, conn) in conns.iter_mut().enumerate() {
            match conn.receive()? {
                Message::TrainResponse { round: r, learner_id, model }
                    if r == round && learner_id == k =>
                {
                    locals.push(model)
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "expected TrainResponse for (round {round}, learner {k}), got {other:?}"
                    )))
                }
            }
        }

        let (weights, per_learner_per_class) = match score_kind {
            None => {
                let sizes: Vec<usize> = shards.iter().map(|s| s.train.len()).collect();
                let per_class = locals
                    .iter()
                    .map(|m| Ok(evaluate(m, test_set)?.per_class_accuracy()))
                    .collect::<Result<Vec<_>>>()?;
                (fedavg_weights(&sizes)?, per_class)
            }
            Some(kind) => {
                let mut scores = Vec::with_capacity(locals.len());
                let mut per_class = Vec::with_capacity(locals.len());
                for (j, model) in locals.iter().enumerate() {
                    for conn in conns.iter_mut() {
                        conn.send(&Message::EvalRequest {
                            round,
                            learner_id: j,
                            model: model.clone(),
                        })?;
                    }
                    let mut cms = Vec::with_capacity(conns.len());
                    for conn in conns.iter_mut() {
                        match conn.receive()? {
                            Message::EvalResponse { round: r, learner_id, cm }
                                if r == round && learner_id == j =>
                            {
                                cms.push(cm)
                            }
                            other => {
                                return Err(Error::Protocol(format!(
                                    "expected EvalResponse for (round {round}, model {j}), got {other:?}"
                                )))
                            }
                        }
                    }
                    let cumulative = accumulate(&cms)?;
                    scores.push(kind.apply(&cumulative)?);
                    per_class.push(cumulative.per_class_accuracy());
                }
                let weights = performance_weights(&scores).map_err(|e| match e {
                    Error::DegenerateWeights { .. } => Error::DegenerateWeights { round },
                    other => other,
                })?;
                (weights, per_class)
            }
        };

        community = weighted_average(&locals, &weights)?;
        let test_cm = evaluate(&community, test_set)?;
        records.push(RoundRecord {
            round,
            learner_ids: (0..config.n_learners).collect(),
            community_test_accuracy: test_cm.trace() as f64 / test_cm.total() as f64,
            per_learner_scores: weights.raw.clone(),
            per_learner_weights: weights.normalized.clone(),
            community_per_class: test_cm.per_class_accuracy(),
            per_learner_per_class,
            community_test_cm: test_cm,
        });
    }

    for conn in conns.iter_mut() {
        conn.send(&Message::Shutdown)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn sample_model() -> ModelParams {
        let arch = Architecture::new(2, vec![], 2).unwrap();
        ModelParams::new(vec![0.1, -2.5, 1.0 / 3.0, 0.0, 1e-300, 7.0], arch).unwrap()
    }

    #[test]
    fn encode_decode_roundtrip() {
        let messages = [
            Message::TrainRequest { round: 3, learner_id: 1, model: sample_model() },
            Message::TrainResponse { round: 3, learner_id: 1, model: sample_model() },
            Message::EvalRequest { round: 0, learner_id: 9, model: sample_model() },
            Message::EvalResponse {
                round: 7,
                learner_id: 2,
                cm: ConfusionMatrix::from_counts(vec![5, 1, 0, 4], 2).unwrap(),
            },
            Message::Shutdown,
        ];
        for m in messages {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn model_floats_survive_bit_exactly() {
        let m = Message::TrainResponse { round: 0, learner_id: 0, model: sample_model() };
        match decode(&encode(&m)).unwrap() {
            Message::TrainResponse { model, .. } => {
                for (a, b) in model.values.iter().zip(&sample_model().values) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn shutdown_golden_bytes() {
        assert_eq!(encode(&Message::Shutdown), b"{\"kind\":\"Shutdown\"}\n");
    }

    #[test]
    fn decode_rejects_malformed_input() {
        assert!(matches!(decode(b"{\"kind\":\"Shut"), Err(Error::Protocol(_))));
        assert!(matches!(decode(b"{\"kind\":\"Foo\"}"), Err(Error::Protocol(_))));
        // payload missing for its kind
        assert!(matches!(
            decode(b"{\"kind\":\"TrainRequest\",\"round\":0,\"learner_id\":0}"),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn unreachable_endpoint_is_named() {
        let err = match Connection::open("127.0.0.1:1", Duration::from_millis(200)) {
            Ok(_) => panic!("expected connection failure"),
            Err(e) => e,
        };
        match err {
            Error::Transport(msg) => assert!(msg.contains("127.0.0.1:1"), "{msg}"),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
