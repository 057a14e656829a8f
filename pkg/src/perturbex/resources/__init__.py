from importlib import resources
import json


def get_configuration_file() -> dict:
    with resources.files("perturbex.resources").joinpath("config.json").open() as json_file:
        return json.load(json_file)


def get_networks_file() -> dict:
    with resources.files("perturbex.resources").joinpath("networks.json").open() as json_file:
        return json.load(json_file)


def get_reference_network(name: str) -> dict:
    networks = get_networks_file()
    if name not in networks or name == "transfer_heads":
        supported = [key for key in networks if key != "transfer_heads"]
        raise ValueError(f"Network {name} is not supported. Supported networks: {supported}")
    return networks[name]


def get_transfer_head(dataset: str) -> str:
    return get_networks_file()["transfer_heads"][dataset]
