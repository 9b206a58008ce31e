#!/usr/bin/env python3
"""
Training Monitor
Tracks progress, metrics and log lines of a GCN training session in memory
"""

import logging
import time
from typing import Dict, List, Optional

HISTORY_LIMIT = 100


class TrainingMonitor:
    def __init__(self, history_limit: int = HISTORY_LIMIT):
        self.history_limit = history_limit
        self.logger = logging.getLogger(__name__)

        # Training state
        self.training_data = {
            'status': 'idle',
            'current_step': 0,
            'total_steps': 0,
            'loss': 0.0,
            'learning_rate': 0.0,
            'temperature': 0.0,
            'val_map': None,
            'elapsed_time': 0.0,
            'n_nodes': 0,
            'samples_per_step': 0,
            'logs': [],
            'metrics_history': {
                'step': [],
                'loss': [],
                'learning_rate': [],
            }
        }
        self._start_time: Optional[float] = None

    def _trim(self, values: List) -> None:
        while len(values) > self.history_limit:
            values.pop(0)

    def update_training_status(self, status: str, **kwargs) -> None:
        """Update the status and any known fields; loss updates extend the history"""
        self.training_data['status'] = status

        for key, value in kwargs.items():
            if key in self.training_data:
                self.training_data[key] = value

        if self._start_time is not None:
            self.training_data['elapsed_time'] = time.monotonic() - self._start_time

        history = self.training_data['metrics_history']
        if 'loss' in kwargs:
            history['loss'].append(kwargs['loss'])
            history['step'].append(kwargs.get('current_step', self.training_data['current_step']))
            self._trim(history['loss'])
            self._trim(history['step'])

        if 'learning_rate' in kwargs:
            history['learning_rate'].append(kwargs['learning_rate'])
            self._trim(history['learning_rate'])

    def add_log(self, message: str, level: str = 'info') -> None:
        """Record a log line and forward it to the module logger"""
        self.training_data['logs'].append({'level': level, 'message': message})
        self._trim(self.training_data['logs'])
        self.logger.log(logging.getLevelName(level.upper()), message)

    def start_training_session(self, total_steps: int, n_nodes: int, samples_per_step: int,
                               temperature: float) -> None:
        """Initialize a new training session"""
        self._start_time = time.monotonic()
        self.training_data.update({
            'status': 'starting',
            'current_step': 0,
            'total_steps': total_steps,
            'n_nodes': n_nodes,
            'samples_per_step': samples_per_step,
            'temperature': temperature,
            'val_map': None,
            'elapsed_time': 0.0,
            'logs': [],
            'metrics_history': {
                'step': [],
                'loss': [],
                'learning_rate': [],
            }
        })

        self.add_log(f"Starting training session: {total_steps} steps over {n_nodes} graph nodes")
        self.add_log(f"Samples per step: {samples_per_step}, temperature: {temperature}")

    def finish_training_session(self) -> None:
        """Mark training as completed"""
        self.update_training_status('completed')
        self.add_log("Training session completed!")

    def fail_training_session(self, reason: str) -> None:
        self.update_training_status('failed')
        self.add_log(f"Training session failed: {reason}", level='error')

    def snapshot(self) -> Dict:
        """Status fields without the history lists"""
        return {k: v for k, v in self.training_data.items() if k not in ('logs', 'metrics_history')}
