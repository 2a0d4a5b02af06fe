//! The proxy on its own: decapsulate a client datagram, forward it with a
//! NAT port, and wrap the reply back into the tunnel.

use quicstep_lab::middlebox::ProxyState;
use quicstep_lab::wire::{tunnel_decap, tunnel_encap, Addr, Datagram, NodeId, TunnelDatagram};

fn main() {
    let client = Addr::new(NodeId(0), 7000);
    let inner_src = Addr::new(NodeId(0), 5000);
    let server = Addr::new(NodeId(2), 443);
    let key = [9u8; 32];
    let mut proxy = ProxyState::new(NodeId(3));
    proxy.provision(client, key);

    let inner = Datagram::new(inner_src, server, b"long header packet".to_vec());
    let wrapped = tunnel_encap(&inner.encode().unwrap(), &key, 1)
        .encode()
        .unwrap();
    let out = proxy.proxy_forward(&Datagram::new(client, proxy.tunnel_addr(), wrapped), 0);
    println!(
        "to server: {} -> {} {:?}",
        out[0].src,
        out[0].dst,
        String::from_utf8_lossy(&out[0].payload)
    );

    let reply = proxy.proxy_forward(&Datagram::new(server, out[0].src, b"reply".to_vec()), 1);
    println!(
        "to client: {} -> {} ({} bytes, opaque)",
        reply[0].src,
        reply[0].dst,
        reply[0].payload.len()
    );
    let back = Datagram::decode(&tunnel_decap(
        &TunnelDatagram::decode(&reply[0].payload).unwrap(),
        &key,
    ))
    .unwrap();
    println!(
        "unwrapped: {} -> {} {:?}",
        back.src,
        back.dst,
        String::from_utf8_lossy(&back.payload)
    );

    let replay = tunnel_encap(&inner.encode().unwrap(), &key, 1)
        .encode()
        .unwrap();
    let dropped = proxy.proxy_forward(&Datagram::new(client, proxy.tunnel_addr(), replay), 2);
    println!(
        "replayed nonce forwarded {} datagrams, stats {:?}",
        dropped.len(),
        proxy.stats
    );
}
