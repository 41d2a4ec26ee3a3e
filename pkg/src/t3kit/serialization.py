# Copyright 2024 t3kit developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""(De)serialization of run configurations

A run configuration is a dictionary of sections, each section a
:class:`param.parameterized.Parameterized` instance (see :mod:`t3kit.params`). Files
are first parsed into plain dictionaries (TOML, YAML, or JSON, chosen by suffix), then
each value is pushed into its parameter by a :class:`ConfigDeserializer` chosen by the
parameter's exact type.
"""

from __future__ import annotations

import abc
import importlib
import importlib.util
import json
import os

from collections import OrderedDict
from io import StringIO
from typing import Any, Dict, Optional, TextIO, Tuple, Union

try:
    from typing import Literal
except ImportError:
    from typing_extensions import Literal

import param

from . import config

__all__ = [
    "ConfigDeserializer",
    "ConfigTypeError",
    "DefaultBooleanDeserializer",
    "DefaultDeserializer",
    "DefaultIntegerDeserializer",
    "DefaultListDeserializer",
    "DefaultListSelectorDeserializer",
    "DefaultNumberDeserializer",
    "DefaultSelectorDeserializer",
    "DefaultStringDeserializer",
    "deserialize_from_dict",
    "deserialize_from_file",
    "deserialize_from_json_to_obj",
    "deserialize_from_toml_to_obj",
    "deserialize_from_yaml_to_obj",
    "serialize_from_obj_to_json",
    "serialize_from_obj_to_yaml",
    "serialize_to_dict",
    "serialize_to_file",
    "yaml_is_available",
]

OnMissing = Literal["ignore", "warn", "raise"]


class ConfigTypeError(TypeError):
    """Raised when a config value cannot be stored in its parameter"""

    def __init__(self, parameterized, name, message=""):
        super(ConfigTypeError, self).__init__(
            "{}.{}: {}".format(parameterized.name, name, message)
        )


def _first_importable(names, purpose):
    for name in names:
        try:
            spec = importlib.util.find_spec(name)
        except (ImportError, ValueError):
            spec = None
        if spec is not None:
            return importlib.import_module(name)
    raise ImportError(f"Could not import any of {tuple(names)} for {purpose}")


def yaml_is_available() -> bool:
    """Whether one of :obj:`t3kit.config.YAML_MODULE_PRIORITIES` can be imported"""
    try:
        _first_importable(config.YAML_MODULE_PRIORITIES, "YAML")
    except ImportError:
        return False
    return True


def deserialize_from_toml_to_obj(file_: Union[str, os.PathLike, TextIO]) -> dict:
    """Parse a TOML file into a dictionary

    The parser is the first importable module in
    :obj:`t3kit.config.TOML_MODULE_PRIORITIES`.
    """
    toml = _first_importable(config.TOML_MODULE_PRIORITIES, "TOML deserialization")
    if isinstance(file_, (str, os.PathLike)):
        with open(file_, "rb") as fp:
            return toml.load(fp)
    return toml.loads(file_.read())


def deserialize_from_yaml_to_obj(file_: Union[str, os.PathLike, TextIO]) -> Any:
    """Parse a YAML file into python objects

    The parser is the first importable module in
    :obj:`t3kit.config.YAML_MODULE_PRIORITIES`.
    """
    if isinstance(file_, (str, os.PathLike)):
        with open(file_) as fp:
            return deserialize_from_yaml_to_obj(fp)
    yaml = _first_importable(config.YAML_MODULE_PRIORITIES, "YAML deserialization")
    if yaml.__name__.startswith("ruamel"):
        obj = yaml.YAML(typ="safe").load(file_)
    else:
        obj = yaml.safe_load(file_)
    return _deorder(obj)


def deserialize_from_json_to_obj(file_: Union[str, os.PathLike, TextIO]) -> Any:
    """Parse a JSON file into python objects"""
    if isinstance(file_, (str, os.PathLike)):
        with open(file_) as fp:
            return json.load(fp)
    return json.load(file_)


def _deorder(d):
    if isinstance(d, dict):
        return dict((str(k), _deorder(v)) for (k, v) in d.items())
    elif isinstance(d, list):
        return [_deorder(v) for v in d]
    return d


def serialize_from_obj_to_json(
    file_: Union[str, os.PathLike, TextIO], obj: Any, indent: Optional[int] = 2
) -> None:
    """Write an object to a JSON file (path or pointer)"""
    if isinstance(file_, (str, os.PathLike)):
        with open(file_, "w") as fp:
            json.dump(obj, fp, indent=indent)
    else:
        json.dump(obj, file_, indent=indent)


def serialize_from_obj_to_yaml(
    file_: Union[str, os.PathLike, TextIO], obj: Any, help: Optional[dict] = None
) -> None:
    """Write an object to a YAML file (path or pointer)

    If `obj` and `help` are both section dictionaries, :mod:`ruamel.yaml` stores the
    help strings as end-of-line comments. :mod:`yaml` writes them as a comment block
    at the top of the file.
    """
    if isinstance(file_, (str, os.PathLike)):
        with open(file_, "w") as fp:
            return serialize_from_obj_to_yaml(fp, obj, help)
    yaml = _first_importable(config.YAML_MODULE_PRIORITIES, "YAML serialization")
    help = help or dict()
    if yaml.__name__.startswith("ruamel"):
        from ruamel.yaml.comments import CommentedMap  # type: ignore

        def commented(d, h):
            cmap = CommentedMap()
            for key, val in d.items():
                hval = h.get(key, None) if isinstance(h, dict) else None
                if isinstance(val, dict):
                    cmap.insert(len(cmap), key, commented(val, hval or dict()))
                elif isinstance(hval, str) and hval:
                    cmap.insert(len(cmap), key, val, comment=hval)
                else:
                    cmap.insert(len(cmap), key, val)
            return cmap

        dumper = yaml.YAML()
        dumper.dump(commented(obj, help) if isinstance(obj, dict) else obj, file_)
    else:
        if help:
            with StringIO() as s:
                yaml.safe_dump(help, s, default_flow_style=False)
                lines = s.getvalue().strip().replace("\n", "\n# ")
            file_.write("# == Help ==\n# " + lines + "\n\n")
        yaml.safe_dump(_deorder(obj), file_, default_flow_style=False, sort_keys=False)


class ConfigDeserializer(object, metaclass=abc.ABCMeta):
    """Deserialize one config value into a parameter of a Parameterized section

    Subclasses implement :func:`deserialize`. The incoming `block` is whatever the file
    parser produced: TOML and JSON give typed scalars and lists, YAML likewise, but
    values may still need casting (e.g. an integer given where a float is expected).
    """

    @abc.abstractmethod
    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        """Deserialize `block` and store it under `name` in `parameterized`

        Raises
        ------
        ConfigTypeError
            If deserialization could not be performed
        """
        raise NotImplementedError()

    @staticmethod
    def check_if_allow_none_and_set(
        name: str, block: Any, parameterized: param.Parameterized
    ) -> bool:
        """Set the parameter to :obj:`None` if `block` is :obj:`None` and that's allowed

        Returns whether the parameter was set. TOML has no null, so an empty string is
        treated as :obj:`None` for parameters which allow it.
        """
        p = parameterized.param[name]
        if (block is None or block == "") and p.allow_None:
            parameterized.param.update({name: None})
            return True
        return False


class DefaultDeserializer(ConfigDeserializer):
    """Catch-all deserializer: none check, then set verbatim"""

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if self.check_if_allow_none_and_set(name, block, parameterized):
            return
        try:
            parameterized.param.update({name: block})
        except ValueError as e:
            raise ConfigTypeError(parameterized, name, str(e)) from e


class DefaultBooleanDeserializer(ConfigDeserializer):
    """Booleans, accepting the usual spellings of true and false"""

    TRUE_VALUES = {"true", "t", "on", "yes", "1"}  #:
    FALSE_VALUES = {"false", "f", "off", "no", "0"}  #:

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if self.check_if_allow_none_and_set(name, block, parameterized):
            return
        if not isinstance(block, bool):
            key = str(block).lower()
            if key in self.TRUE_VALUES:
                block = True
            elif key in self.FALSE_VALUES:
                block = False
            else:
                raise ConfigTypeError(
                    parameterized, name, f'cannot convert "{block}" to bool'
                )
        parameterized.param.update({name: block})


class _CastDeserializer(ConfigDeserializer):
    """Default {0} deserializer

    None check, then cast `block` to :class:`{0}` unless it already is one.
    """

    class_: type = object

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if self.check_if_allow_none_and_set(name, block, parameterized):
            return
        try:
            if isinstance(block, bool) and self.class_ is not str:
                raise ValueError(f"refusing to read bool {block} as a number")
            if not isinstance(block, self.class_):
                block = self.class_(block)
            parameterized.param.update({name: block})
        except (TypeError, ValueError) as e:
            raise ConfigTypeError(parameterized, name, str(e)) from e


class DefaultIntegerDeserializer(_CastDeserializer):
    __doc__ = _CastDeserializer.__doc__.format("int")
    class_ = int

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if isinstance(block, float):
            if not block.is_integer():
                raise ConfigTypeError(
                    parameterized, name, f"{block} is not an integer"
                )
            block = int(block)
        super().deserialize(name, block, parameterized)


class DefaultNumberDeserializer(_CastDeserializer):
    __doc__ = _CastDeserializer.__doc__.format("float")
    class_ = float


class DefaultStringDeserializer(_CastDeserializer):
    __doc__ = _CastDeserializer.__doc__.format("str")
    class_ = str


def _find_object_in_selector(name, block, parameterized):
    named_objs = parameterized.param[name].get_range()
    for val in named_objs.values():
        if val == block:
            return val
    if str(block) in named_objs:
        return named_objs[str(block)]
    raise ConfigTypeError(
        parameterized,
        name,
        'cannot find "{}" in choices {}'.format(block, tuple(named_objs)),
    )


class DefaultSelectorDeserializer(ConfigDeserializer):
    """Match `block` against the values (then names) of a :class:`param.Selector`"""

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if self.check_if_allow_none_and_set(name, block, parameterized):
            return
        block = _find_object_in_selector(name, block, parameterized)
        parameterized.param.update({name: block})


class DefaultListSelectorDeserializer(ConfigDeserializer):
    """Match each element of `block` against a :class:`param.ListSelector`'s range"""

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if isinstance(block, str):
            block = [x for x in block.replace(",", " ").split() if x]
        try:
            block = [_find_object_in_selector(name, x, parameterized) for x in block]
        except TypeError as e:
            raise ConfigTypeError(parameterized, name, str(e)) from e
        parameterized.param.update({name: block})


class DefaultListDeserializer(ConfigDeserializer):
    """Lists: none check, then cast elements to the item type if there is one"""

    def deserialize(
        self, name: str, block: Any, parameterized: param.Parameterized
    ) -> None:
        if self.check_if_allow_none_and_set(name, block, parameterized):
            return
        p = parameterized.param[name]
        class_ = getattr(p, "item_type", None) or getattr(p, "class_", None)
        try:
            if class_:
                block = [x if isinstance(x, class_) else class_(x) for x in block]
            else:
                block = list(block)
            parameterized.param.update({name: block})
        except (TypeError, ValueError) as e:
            raise ConfigTypeError(parameterized, name, str(e)) from e


DEFAULT_BACKUP_DESERIALIZER = DefaultDeserializer()

DEFAULT_DESERIALIZER_DICT = {
    param.Boolean: DefaultBooleanDeserializer(),
    param.Integer: DefaultIntegerDeserializer(),
    param.List: DefaultListDeserializer(),
    param.ListSelector: DefaultListSelectorDeserializer(),
    param.Number: DefaultNumberDeserializer(),
    param.ObjectSelector: DefaultSelectorDeserializer(),
    param.Selector: DefaultSelectorDeserializer(),
    param.String: DefaultStringDeserializer(),
}


def _deserialize_from_dict_flat(
    dict_, parameterized, deserializer_type_dict, on_missing
):
    if deserializer_type_dict:
        type_dict = dict(DEFAULT_DESERIALIZER_DICT)
        type_dict.update(deserializer_type_dict)
    else:
        type_dict = DEFAULT_DESERIALIZER_DICT
    for name, block in dict_.items():
        if name not in parameterized.param.values() or name == "name":
            msg = 'No param "{}" to set in "{}"'.format(name, parameterized.name)
            if on_missing == "warn":
                parameterized.param.warning(msg)
            elif on_missing == "raise":
                raise ValueError(msg)
            continue
        deserializer = type_dict.get(
            type(parameterized.param[name]), DEFAULT_BACKUP_DESERIALIZER
        )
        deserializer.deserialize(name, block, parameterized)


def deserialize_from_dict(
    dict_: dict,
    parameterized: Union[param.Parameterized, Dict[str, Any]],
    deserializer_type_dict: Optional[dict] = None,
    on_missing: OnMissing = "warn",
) -> None:
    """Deserialize a dictionary into a parameterized section or a dict of sections

    If `parameterized` is a :class:`param.parameterized.Parameterized`, every key of
    `dict_` names a parameter. If it is a dictionary ("hierarchical mode"), the keys of
    `dict_` name sections and the procedure recurses. A section present in
    `parameterized` but absent from `dict_` is left untouched.

    Each value is deserialized by the entry of `deserializer_type_dict` whose key
    *exactly matches* the parameter type, falling back to the defaults in
    :obj:`DEFAULT_DESERIALIZER_DICT`, then to :class:`DefaultDeserializer`.

    Parameters
    ----------
    dict_
    parameterized
    deserializer_type_dict
    on_missing
        What to do with keys of `dict_` which match no parameter or section

    Raises
    ------
    ConfigTypeError
        If deserialization of a value fails
    ValueError
        If `on_missing` is ``"raise"`` and an unknown key is found
    """
    stack = [(dict_, parameterized, tuple())]
    while stack:
        d, p, chain = stack.pop()
        if isinstance(p, param.Parameterized):
            if not isinstance(d, dict):
                raise ConfigTypeError(p, "*", f"expected a table, got {d!r}")
            _deserialize_from_dict_flat(d, p, deserializer_type_dict, on_missing)
            continue
        for name in d:
            child = p.get(name, None)
            if child is None:
                msg = (
                    "config contains key chain {} but no section to match it"
                ).format(chain + (name,))
                if on_missing == "raise":
                    raise ValueError(msg)
                elif on_missing == "warn":
                    param.get_logger(name="t3kit").warning(msg)
                continue
            stack.append((d[name], child, chain + (name,)))


def _serialize_value(value):
    if isinstance(value, tuple):
        return [_serialize_value(x) for x in value]
    if isinstance(value, list):
        return [_serialize_value(x) for x in value]
    return value


def serialize_to_dict(
    parameterized: Union[param.Parameterized, Dict[str, Any]],
) -> Tuple[OrderedDict, dict]:
    """Serialize a section or a dict of sections into plain dictionaries

    Returns
    -------
    dict_, help_dict
        `dict_` mirrors the structure of `parameterized` with parameter values
        (tuples become lists; the ``name`` parameter is skipped). `help_dict` has the
        same structure, holding each parameter's ``doc`` string where one exists.
        Parameters within a section are sorted alphabetically for deterministic output.
    """
    if isinstance(parameterized, param.Parameterized):
        dict_, help_dict = OrderedDict(), dict()
        for name in sorted(parameterized.param.values()):
            if name == "name":
                continue
            dict_[name] = _serialize_value(getattr(parameterized, name))
            doc = parameterized.param[name].doc
            if doc:
                help_dict[name] = " ".join(doc.split())
        return dict_, help_dict
    dict_, help_dict = OrderedDict(), dict()
    for name, child in parameterized.items():
        dict_[name], help_dict[name] = serialize_to_dict(child)
    return dict_, help_dict


_READERS = {
    ".toml": deserialize_from_toml_to_obj,
    ".yaml": deserialize_from_yaml_to_obj,
    ".yml": deserialize_from_yaml_to_obj,
    ".json": deserialize_from_json_to_obj,
}


def deserialize_from_file(
    path: Union[str, os.PathLike],
    parameterized: Union[param.Parameterized, Dict[str, Any]],
    deserializer_type_dict: Optional[dict] = None,
    on_missing: OnMissing = "warn",
) -> None:
    """Read a TOML, YAML, or JSON file (by suffix) into `parameterized`

    Composes the matching ``deserialize_from_*_to_obj`` with
    :func:`deserialize_from_dict`.
    """
    suffix = os.path.splitext(os.fspath(path))[1].lower()
    reader = _READERS.get(suffix, None)
    if reader is None:
        raise ValueError(
            f"'{path}': unknown config suffix '{suffix}'. Expected one of "
            f"{tuple(_READERS)}"
        )
    try:
        dict_ = reader(path)
    except OSError as e:
        raise OSError(f"could not read config '{path}': {e}") from e
    deserialize_from_dict(dict_, parameterized, deserializer_type_dict, on_missing)


def serialize_to_file(
    path: Union[str, os.PathLike, TextIO],
    parameterized: Union[param.Parameterized, Dict[str, Any]],
    format: Literal["yaml", "json"] = "json",
) -> None:
    """Write a section or dict of sections to a YAML or JSON file"""
    dict_, help_dict = serialize_to_dict(parameterized)
    if format == "yaml":
        serialize_from_obj_to_yaml(path, dict_, help_dict)
    elif format == "json":
        serialize_from_obj_to_json(path, dict_)
    else:
        raise ValueError(f"format must be 'yaml' or 'json', got '{format}'")
