import argparse
import sys

from . import __version__
from .model import ModelError, load_model
from .server import ServerConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pyserver", description="Serve next-token logits over the wire protocol."
    )
    parser.add_argument("--model", default="stub",
                        help="'stub' or a Hugging Face image-text-to-text model id")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8760)
    parser.add_argument("--max-concurrent", type=int, default=4)
    parser.add_argument("--version", action="version", version=__version__)
    args = parser.parse_args(argv)
    try:
        cfg = ServerConfig(args.model, args.device, args.host, args.port, args.max_concurrent)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        model = load_model(cfg.model, cfg.device)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"serving {model.name} on http://{cfg.host}:{cfg.port}", file=sys.stderr)
    try:
        serve(cfg, model)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
