//! Standalone service binary.

#[tokio::main]
async fn main() {
    let mut addr = "127.0.0.1:7878".to_string();
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--addr" => match args.next() {
                Some(value) => addr = value,
                None => {
                    eprintln!("--addr needs a HOST:PORT value");
                    std::process::exit(2);
                }
            },
            "--help" | "-h" => {
                println!("usage: obeval-server [--addr HOST:PORT]   (default 127.0.0.1:7878)");
                return;
            }
            other => {
                eprintln!("unknown argument `{other}`");
                std::process::exit(2);
            }
        }
    }
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(listener) => listener,
        Err(e) => {
            eprintln!("failed to bind {addr}: {e}");
            std::process::exit(2);
        }
    };
    println!("obeval-server listening on http://{addr}");
    if let Err(e) = obeval_server::serve(listener).await {
        eprintln!("server error: {e}");
        std::process::exit(1);
    }
}
