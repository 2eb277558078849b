import json
import os

__location__ = os.path.realpath(os.path.join(os.getcwd(), os.path.dirname(__file__)))
DATA_DIR = os.path.join(__location__, "..", "data")


def data_file(*parts):
    return os.path.join(DATA_DIR, *parts)


def load_data(*parts):
    with open(data_file(*parts), "r") as f:
        return json.load(f)
