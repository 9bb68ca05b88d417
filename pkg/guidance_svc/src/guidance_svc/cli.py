"""Command line entry points: serve a guidance endpoint, or train weights."""

from __future__ import annotations

import argparse
import sys

from .denoiser import init_state, load_state, save_state


def _parse_listen(value: str):
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"--listen needs HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    from .server import GuidanceService

    if args.weights:
        state = load_state(args.weights)
    else:
        state = init_state(seed=args.seed)
        state.start_stage2()
    with GuidanceService(args.listen, state, echo=args.echo) as service:
        host, port = service.server_address[:2]
        mode = "echo" if args.echo else "denoise"
        print(f"serving {mode} on {host}:{port}", flush=True)
        try:
            service.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def cmd_train(args) -> int:
    from .train import train_stage1, train_stage2

    state = init_state(seed=args.seed, n_features=args.features)
    s1 = train_stage1(state, args.data_root, args.stage1_steps, args.batch, args.lr, args.seed)
    s2 = train_stage2(state, args.data_root, args.stage2_steps, args.batch, args.lr, args.seed + 1)
    save_state(args.out, state)
    if s1:
        print(f"stage1: {len(s1)} steps, loss {s1[0]:.3f} -> {s1[-1]:.3f}")
    if s2:
        print(f"stage2: {len(s2)} steps, loss {s2[0]:.3f} -> {s2[-1]:.3f}")
    print(f"weights written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidance-svc")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="answer guidance requests on a TCP endpoint")
    serve.add_argument("--listen", type=_parse_listen, default=("127.0.0.1", 7060))
    serve.add_argument("--echo", action="store_true", help="return the rendered input unchanged")
    serve.add_argument("--seed", type=int, default=0)
    serve.add_argument("--weights", default=None, help="weights file from the train subcommand")
    serve.set_defaults(func=cmd_serve)

    train = sub.add_parser("train", help="two-stage smoke training on a dataset directory")
    train.add_argument("--data-root", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--stage1-steps", type=int, default=20)
    train.add_argument("--stage2-steps", type=int, default=10)
    train.add_argument("--batch", type=int, default=2)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--features", type=int, default=8)
    train.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
