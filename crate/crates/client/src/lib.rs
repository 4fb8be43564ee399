//! Clients for the teleoperation service: HTTP calls and a line-stream
//! connection over TCP.

use std::net::SocketAddr;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use teleop_core::session::{ReplayReport, StreamMessage, TrajectoryPoint};
use teleop_service::{ApiError, Health, MapRequest, MapResponse, ReplayRequest, SessionInfo};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad message from server: {0}")]
    Decode(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] teleop_core::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// HTTP API client. `base` is e.g. `http://127.0.0.1:8080`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: reqwest::Client,
}

impl HttpClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ApiError>(&text)
            .map(|e| e.error)
            .unwrap_or(text);
        Err(ClientError::Rejected {
            status: status.as_u16(),
            message,
        })
    }

    pub async fn health(&self) -> Result<Health> {
        Self::decode(self.http.get(self.url("/v1/health")).send().await?).await
    }

    pub async fn session(&self) -> Result<SessionInfo> {
        Self::decode(self.http.get(self.url("/v1/session")).send().await?).await
    }

    pub async fn map(&self, req: &MapRequest) -> Result<MapResponse> {
        Self::decode(self.http.post(self.url("/v1/map")).json(req).send().await?).await
    }

    pub async fn replay_eval(&self, trajectory: Vec<TrajectoryPoint>) -> Result<ReplayReport> {
        let req = ReplayRequest { trajectory };
        Self::decode(
            self.http
                .post(self.url("/v1/replay-eval"))
                .json(&req)
                .send()
                .await?,
        )
        .await
    }
}

/// One session over the TCP line protocol.
pub struct StreamClient {
    reader: Lines<BufReader<OwnedReadHalf>>,
    writer: OwnedWriteHalf,
}

impl StreamClient {
    pub async fn connect(addr: SocketAddr) -> Result<Self> {
        let (read, writer) = TcpStream::connect(addr).await?.into_split();
        Ok(Self {
            reader: BufReader::new(read).lines(),
            writer,
        })
    }

    pub async fn send(&mut self, msg: &StreamMessage) -> Result<()> {
        let mut line = msg.to_line()?;
        line.push('\n');
        self.writer.write_all(line.as_bytes()).await?;
        Ok(())
    }

    /// Next reply, or `None` once the server closed the connection.
    pub async fn recv(&mut self) -> Result<Option<StreamMessage>> {
        match self.reader.next_line().await? {
            Some(line) => Ok(Some(serde_json::from_str(&line)?)),
            None => Ok(None),
        }
    }

    /// Sends one message and waits for its first reply. An FK frame that
    /// follows a slave pose stays queued for `recv`.
    pub async fn request(&mut self, msg: &StreamMessage) -> Result<StreamMessage> {
        self.send(msg).await?;
        self.recv()
            .await?
            .ok_or_else(|| ClientError::Io(std::io::ErrorKind::UnexpectedEof.into()))
    }

    /// Stops sending; replies still in flight can be read with `recv`.
    pub async fn finish(&mut self) -> Result<()> {
        self.writer.shutdown().await?;
        Ok(())
    }
}
