//! TCP transport: a thread-per-connection server and a blocking client connection.

use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use pirpsi_core::client::Connection;
use pirpsi_core::server::DatabaseServer;
use pirpsi_core::wire::{read_frame, write_frame, ErrorCode, Frame, WireError};

pub struct TcpConnection {
    stream: TcpStream,
}

impl TcpConnection {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(120)))?;
        Ok(TcpConnection { stream })
    }
}

impl Connection for TcpConnection {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, WireError> {
        write_frame(&mut self.stream, frame)?;
        read_frame(&mut self.stream)?.ok_or_else(|| WireError::Frame("server closed the connection".into()))
    }
}

/// Answers frames on one connection until the peer hangs up.
///
/// A frame that cannot be parsed gets an `ERROR` reply, after which the
/// stream is closed since its framing can no longer be trusted.
pub fn serve_connection(mut stream: TcpStream, server: Arc<DatabaseServer>) {
    let _ = stream.set_nodelay(true);
    let mut session = server.session();
    loop {
        match read_frame(&mut stream) {
            Ok(Some(frame)) => {
                let reply = session.handle(&frame);
                if write_frame(&mut stream, &reply).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(WireError::Frame(msg)) | Err(WireError::Payload(msg)) => {
                let _ = write_frame(&mut stream, &Frame::error(ErrorCode::MalformedFrame, &msg));
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
            Err(WireError::Io(_)) => return,
        }
    }
}

/// Accepts connections forever, one thread each.
pub fn serve(listener: TcpListener, server: Arc<DatabaseServer>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let server = Arc::clone(&server);
        thread::spawn(move || serve_connection(stream, server));
    }
    Ok(())
}

/// Binds `addr` and serves in a background thread.
pub fn spawn_server<A: ToSocketAddrs>(
    addr: A,
    server: Arc<DatabaseServer>,
) -> io::Result<(SocketAddr, JoinHandle<io::Result<()>>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((local, thread::spawn(move || serve(listener, server))))
}
