from .checkpoint import (CheckpointError, CorruptHeaderError, ShapeMismatchError, TruncatedBlobError,
                         VersionMismatchError, load_checkpoint, save_checkpoint)
from .images import UnsupportedImageFormat, read_image, write_image
from .metrics import psnr, ssim
from .scenes import (AnalyticScene, Dataset, Primitive, UnknownSceneError, build_dataset, camera_rig,
                     generate_scene, load_dataset, render_reference, save_dataset)
