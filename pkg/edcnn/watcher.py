import logging
from pathlib import Path
from typing import Callable

from watchdog.events import FileSystemEventHandler
from watchdog.observers import Observer

DenoiseFn = Callable[[Path, Path], None]


class DenoiseHandler(FileSystemEventHandler):
    """Denoises every ``.pgm`` that is created in, or moved into, the watched folder."""

    def __init__(self, out_dir: Path, denoise_file: DenoiseFn):
        self.out_dir = Path(out_dir)
        self.denoise_file = denoise_file
        self.processed = 0

    def _handle(self, path: str) -> None:
        src = Path(path)
        if src.suffix.lower() != ".pgm":
            return
        try:
            self.denoise_file(src, self.out_dir / src.name)
            self.processed += 1
        except Exception as e:
            logging.warning(f"Error denoising {src}: {e}")

    def on_created(self, event):
        if not event.is_directory:
            self._handle(event.src_path)

    def on_moved(self, event):
        if not event.is_directory:
            self._handle(event.dest_path)


class DenoiseWatcher:
    """Watches an input folder and writes denoised copies to an output folder."""

    def __init__(self, in_dir: Path, out_dir: Path, denoise_file: DenoiseFn):
        self.in_dir = Path(in_dir)
        self.handler = DenoiseHandler(out_dir, denoise_file)
        self.observer = Observer()
        self.observer.schedule(self.handler, str(self.in_dir), recursive=False)
        self._started = False

    def __enter__(self):
        if not self._started:
            self.observer.start()
            self._started = True
            logging.info(f"Watching {self.in_dir} for new .pgm images")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._started:
            self.observer.stop()
            self.observer.join(timeout=2.0)
            self._started = False
            logging.info(f"Stopped watching {self.in_dir} ({self.handler.processed} images denoised)")
