//! Running the service.

use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;

use crate::api::{router, AppState};
use crate::config::{ConfigError, GateConfig};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    ConfigInvalid(#[from] ConfigError),
    #[error("cannot listen on {addr}: {source}")]
    PortUnavailable {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
    #[error("server failed: {0}")]
    Io(#[from] io::Error),
}

/// Builds the shared state for `config`, restoring the ledger.
pub fn open_state(config: &GateConfig) -> Result<AppState, ConfigError> {
    let (orch, clock) = config.open()?;
    Ok(AppState::new(orch, clock, config.coldstore.clone()))
}

/// Serves until the process is interrupted. With a nonzero
/// `cycle_period_s`, monitoring cycles also run in the background.
pub async fn serve(config: GateConfig) -> Result<(), ServeError> {
    let state = open_state(&config)?;
    let listener = TcpListener::bind(config.listen_addr)
        .await
        .map_err(|source| ServeError::PortUnavailable { addr: config.listen_addr, source })?;
    let addr = listener.local_addr()?;
    println!("swdist listening on http://{addr}");
    if config.cycle_period_s > 0 {
        tokio::spawn(cycle_loop(state.clone(), Duration::from_secs(config.cycle_period_s)));
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn cycle_loop(state: AppState, period: Duration) {
    let mut tick = tokio::time::interval(period);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    tick.tick().await;
    loop {
        tick.tick().await;
        let s = state.clone();
        match tokio::task::spawn_blocking(move || s.run_cycle()).await {
            Ok(Ok((report, seq))) => println!(
                "cycle: {} probes, {} submitted, {} skipped, ledger at {seq}",
                report.probes.len(),
                report.submitted.len(),
                report.skipped.len()
            ),
            Ok(Err(e)) => eprintln!("cycle: {} ({})", e.message, e.reason),
            Err(e) => eprintln!("cycle: {e}"),
        }
    }
}
