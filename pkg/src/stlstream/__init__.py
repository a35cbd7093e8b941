"""Layer-by-layer streaming of STL designs to a remote printer."""
from .config import MachineLimits, MachineSpec, PrintConfig
from .gcode import GcodeProgram, parse_gcode, remove_redundant, validate
from .mesh import Aabb, Mesh, RigidTransform, parse_stl, signed_volume, write_stl
from .printer_sim import DirectChannel, PrinterSim
from .protocol import Kind, Message, frame_message, parse_frame, run_client, run_manufacturer
from .sectioner import GuideSpec, Slab, SupportSpec, prepare_mesh, section_job, section_mesh
from .slicer import cross_section, slice_mesh, slice_slab

__version__ = "0.1.0"

__all__ = [
    "MachineLimits", "MachineSpec", "PrintConfig",
    "GcodeProgram", "parse_gcode", "remove_redundant", "validate",
    "Aabb", "Mesh", "RigidTransform", "parse_stl", "signed_volume", "write_stl",
    "DirectChannel", "PrinterSim",
    "Kind", "Message", "frame_message", "parse_frame", "run_client", "run_manufacturer",
    "GuideSpec", "Slab", "SupportSpec", "prepare_mesh", "section_job", "section_mesh",
    "cross_section", "slice_mesh", "slice_slab",
]
