from fastapi import FastAPI, HTTPException, UploadFile, File, Body
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, ValidationError
from typing import List, Dict, Optional, Any
import json
import logging
import os
import re
import sys

from QSRStudio import __version__
from QSRStudio.feasibility import SolverSettings
from QSRStudio.model import (QSRError, ValidationIssue, content_hash, network_from_dict, network_to_dict,
                             subsystem_from_dict, supply_from_entry, supply_preset, validate_network, SupplyEntry,
                             as_matrix)
from QSRStudio.pipeline import (report_from_dict, run_analysis, run_compositional, run_switched_synthesis,
                                run_synthesis, network_hash)

logger = logging.getLogger(__name__)

# --- FastAPI App Setup ---
app = FastAPI(title="QSRStudio API", version=__version__)
app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_credentials=True, allow_methods=["*"], allow_headers=["*"])

# --- Data Models ---
class ValidationResponse(BaseModel): valid: bool; issues: List[ValidationIssue]; hash: Optional[str] = None
class FixtureInfo(BaseModel): name: str; comment: Optional[str] = None; subsystems: int

class RunRequest(BaseModel):
    network: Dict[str, Any]
    sequence: Optional[List[Any]] = None
    settings: Optional[SolverSettings] = None
    verify: bool = False

class ComposeRequest(BaseModel):
    network: Dict[str, Any]
    report: Dict[str, Any]
    subsystem: Dict[str, Any]
    coupling: List[Dict[str, Any]] = []
    supply: Dict[str, Any]
    settings: Optional[SolverSettings] = None

class PresetResponse(BaseModel): kind: str; Q: List[List[float]]; S: List[List[float]]; R: List[List[float]]; gain_variable: bool

# --- Data Loading ---
__location__ = os.path.realpath(os.path.join(os.getcwd(), os.path.dirname(__file__)))
NAME_PATTERN = re.compile(r"^[A-Za-z0-9_.-]+$")

def data_path(*parts: str) -> str:
    return os.path.join(__location__, "data", *parts)

def load_json_data(file_path: str):
    full_path = data_path(file_path)
    try:
        with open(full_path, "r") as f: return json.load(f)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"{file_path} not found.")
    except json.JSONDecodeError as e:
        raise HTTPException(status_code=500, detail=f"{file_path} is not valid JSON: {e}")

def write_json_data(file_path: str, data):
    full_path = data_path(file_path)
    os.makedirs(os.path.dirname(full_path), exist_ok=True)
    with open(full_path, "w") as f: json.dump(data, f, indent=2, sort_keys=True)

def _checked_name(name: str) -> str:
    base = name[:-5] if name.endswith(".json") else name
    if not NAME_PATTERN.match(base):
        raise HTTPException(status_code=400, detail=f"Invalid name '{name}'.")
    return base + ".json"

def _network(data: Dict[str, Any], sequence=None):
    net = network_from_dict(data)
    return net.with_sequence(sequence) if sequence is not None else net

# --- Fixture Endpoints ---
@app.get("/fixtures", response_model=List[FixtureInfo])
def list_fixtures():
    folder = data_path("fixtures")
    out = []
    for file_name in sorted(os.listdir(folder)):
        if not file_name.endswith(".json"): continue
        data = load_json_data(os.path.join("fixtures", file_name))
        out.append(FixtureInfo(name=file_name[:-5], comment=data.get("comment"), subsystems=len(data.get("subsystems", []))))
    return out

@app.get("/fixtures/{name}")
def get_fixture(name: str):
    return load_json_data(os.path.join("fixtures", _checked_name(name)))

@app.get("/supply-presets/{kind}", response_model=PresetResponse)
def get_supply_preset(kind: str, params: str = "", m: int = 1, l: int = 1):
    try:
        values = [float(v) for v in params.split(",") if v.strip()]
        s = supply_preset(kind, values, m=m, l=l)
    except (QSRError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return PresetResponse(kind=s.kind, Q=s.Q.tolist(), S=s.S.tolist(), R=s.R.tolist(), gain_variable=s.gain_variable)

# --- Validation Endpoints ---
@app.post("/validate", response_model=ValidationResponse)
def validate(network: Dict[str, Any] = Body(...)):
    try:
        net = _network(network)
    except (QSRError, ValidationError, ValueError) as e:
        return ValidationResponse(valid=False, issues=[ValidationIssue(kind="parse", message=str(e))])
    issues = validate_network(net)
    return ValidationResponse(valid=not issues, issues=issues, hash=network_hash(net))

@app.post("/upload/network", response_model=ValidationResponse)
async def upload_network(file: UploadFile = File(...)):
    content = await file.read()
    try:
        net = _network(json.loads(content))
    except json.JSONDecodeError as e:
        raise HTTPException(status_code=400, detail=f"Invalid file format: {e}")
    except (QSRError, ValidationError, ValueError) as e:
        return ValidationResponse(valid=False, issues=[ValidationIssue(kind="parse", message=str(e))], hash=content_hash(content))
    issues = validate_network(net)
    return ValidationResponse(valid=not issues, issues=issues, hash=content_hash(content))

# --- Certification Endpoints ---
def _run(req: RunRequest, runner):
    try:
        net = _network(req.network, req.sequence)
        report = runner(net, req.settings or SolverSettings(), verify=req.verify)
    except (QSRError, ValidationError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception("Run failed")
        raise HTTPException(status_code=500, detail=str(e))
    return report.to_dict()

@app.post("/analyze")
def analyze(req: RunRequest):
    return _run(req, run_analysis)

@app.post("/synthesize")
def synthesize(req: RunRequest):
    try:
        switched = _network(req.network).is_switched
    except (QSRError, ValidationError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return _run(req, run_switched_synthesis if switched else run_synthesis)

@app.post("/compose")
def compose(req: ComposeRequest):
    try:
        net = _network(req.network)
        base = report_from_dict(req.report)
        new_sub = subsystem_from_dict(req.subsystem)
        coupling = {(int(e["to"]), int(e["from"])): as_matrix(e["H"], "H") for e in req.coupling}
        supply = supply_from_entry(SupplyEntry(subsystem=net.size, **req.supply), new_sub.dims)
        ext, report = run_compositional(net, base, new_sub, coupling, supply, req.settings or SolverSettings(),
                                        net_hash=network_hash(net))
    except (QSRError, ValidationError, ValueError, KeyError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return {"network": network_to_dict(ext), "report": report.to_dict()}

# --- Report Endpoints ---
@app.post("/reports/{name}")
def save_report(name: str, report: Dict[str, Any] = Body(...)):
    try:
        parsed = report_from_dict(report)
    except (ValidationError, ValueError, KeyError) as e:
        raise HTTPException(status_code=400, detail=f"Invalid report: {e}")
    file_name = _checked_name(name)
    write_json_data(os.path.join("reports", file_name), parsed.to_dict())
    return {"success": True, "message": f"Report saved as {file_name}."}

@app.get("/reports/{name}")
def get_report(name: str):
    return load_json_data(os.path.join("reports", _checked_name(name)))

if __name__ == "__main__":
    import uvicorn
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler('qsrstudio.log')
        ]
    )
    uvicorn.run(app, host="127.0.0.1", port=8000)
