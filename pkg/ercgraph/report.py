"""
Run artifacts: metrics JSON, plot-ready CSV tables and an optional .docx
evaluation report.
"""

import csv
import json
import logging
import os

from docx import Document
from docx.enum.text import WD_ALIGN_PARAGRAPH
from docx.oxml import OxmlElement
from docx.oxml.ns import qn

logger = logging.getLogger(__name__)

DEFAULT_TABLE_STYLE = 'Table Grid'
HEADER_FILL = 'D9D9D9'  # light grey
DIAGONAL_FILL = 'E2EFDA'  # light green

METRICS_FILE = 'metrics.json'
PER_CLASS_FILE = 'per_class.csv'
CONFUSION_FILE = 'confusion.csv'
HISTORY_FILE = 'history.csv'
PREDICTIONS_FILE = 'predictions.csv'
REPORT_FILE = 'report.docx'


def write_metrics_json(path, metrics, labels, extra=None):
    payload = metrics.to_dict(labels)
    if extra:
        payload.update(extra)
    with open(path, 'w', encoding='utf-8') as outfile:
        json.dump(payload, outfile, indent=2, sort_keys=True)
    return payload


def write_table_csv(path, header, rows):
    with open(path, 'w', encoding='utf-8', newline='') as outfile:
        writer = csv.writer(outfile, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def write_per_class_csv(path, metrics, labels):
    rows = [
        (label, int(metrics.support[k]), repr(float(metrics.precision[k])),
         repr(float(metrics.recall[k])), repr(float(metrics.per_class_f1[k])))
        for k, label in enumerate(labels)
    ]
    write_table_csv(path, ('label', 'support', 'precision', 'recall', 'f1'), rows)


def write_confusion_csv(path, metrics, labels):
    """Gold classes as rows, predicted classes as columns."""
    rows = [(label, *metrics.confusion[k].tolist()) for k, label in enumerate(labels)]
    write_table_csv(path, ('gold\\predicted', *labels), rows)


def write_history_csv(path, history):
    rows = [
        (r.epoch, repr(r.train_loss), '' if r.val_waf1 is None else repr(r.val_waf1))
        for r in history
    ]
    write_table_csv(path, ('epoch', 'train_loss', 'val_waf1'), rows)


def write_predictions_csv(path, predictions, labels):
    header = ('conversation_id', 'utterance_id', 'gold', 'predicted', *(f'p_{label}' for label in labels))
    rows = [
        (conversation_id, utterance_id, labels[gold], labels[pred], *(repr(float(x)) for x in probs))
        for conversation_id, utterance_id, gold, pred, probs in predictions
    ]
    write_table_csv(path, header, rows)


def _format(value):
    if isinstance(value, float):
        return f'{value:.4f}'
    return str(value)


class EvaluationReport:
    """
    Builds a .docx summary of one evaluation: WAF1 and accuracy, a per-class
    table and the confusion matrix.
    """

    def __init__(self):
        self.options = {
            'per-class': True,
            'confusion': True,
            'shade-diagonal': True,
            'config': True,
        }
        self.table_style = DEFAULT_TABLE_STYLE

    def set_initial_attrs(self, document=None):
        self.doc = document if document is not None else Document()

    def _shade(self, cell, fill):
        tcPr = cell._tc.get_or_add_tcPr()
        shd = OxmlElement('w:shd')
        shd.set(qn('w:val'), 'clear')
        shd.set(qn('w:color'), 'auto')
        shd.set(qn('w:fill'), fill)
        tcPr.append(shd)

    def add_table(self, header, rows):
        """Adds a table whose first row is a bold, shaded header."""
        table = self.doc.add_table(rows=len(rows) + 1, cols=len(header))
        table.style = self.table_style
        for j, text in enumerate(header):
            cell = table.cell(0, j)
            cell.text = str(text)
            for p in cell.paragraphs:
                for run in p.runs:
                    run.bold = True
            self._shade(cell, HEADER_FILL)
        for i, values in enumerate(rows, start=1):
            for j, value in enumerate(values):
                cell = table.cell(i, j)
                cell.text = _format(value)
                if j > 0:
                    for p in cell.paragraphs:
                        p.alignment = WD_ALIGN_PARAGRAPH.RIGHT
        return table

    def build(self, metrics, labels, title='Evaluation report', config=None, document=None):
        """
        :param Metrics metrics: evaluation result.
        :param labels: class names in index order.
        :param dict config: optional config echo listed at the end.
        :rtype: docx.document.Document
        """
        self.set_initial_attrs(document)
        self.doc.add_heading(title, level=1)
        summary = self.doc.add_paragraph()
        summary.add_run('Weighted average F1: ').bold = True
        summary.add_run(f'{metrics.waf1:.4f}')
        summary.add_run('    Accuracy: ').bold = True
        summary.add_run(f'{metrics.accuracy:.4f}')
        summary.add_run(f'    Utterances: {metrics.total}')
        if self.options['per-class']:
            self.doc.add_heading('Per-class scores', level=2)
            self.add_table(
                ('Class', 'Support', 'Precision', 'Recall', 'F1'),
                [
                    (label, int(metrics.support[k]), float(metrics.precision[k]),
                     float(metrics.recall[k]), float(metrics.per_class_f1[k]))
                    for k, label in enumerate(labels)
                ],
            )
        if self.options['confusion']:
            self.doc.add_heading('Confusion matrix (rows: gold, columns: predicted)', level=2)
            table = self.add_table(
                ('', *labels),
                [(label, *(int(x) for x in metrics.confusion[k])) for k, label in enumerate(labels)],
            )
            if self.options['shade-diagonal']:
                for k in range(len(labels)):
                    self._shade(table.cell(k + 1, k + 1), DIAGONAL_FILL)
        if self.options['config'] and config:
            self.doc.add_heading('Configuration', level=2)
            for key in sorted(config):
                p = self.doc.add_paragraph(style='List Bullet')
                p.add_run(f'{key}: ').bold = True
                p.add_run(str(config[key]))
        return self.doc

    def write(self, path, metrics, labels, **kwargs):
        doc = self.build(metrics, labels, **kwargs)
        doc.save(path)
        logger.info('wrote report %s', os.path.abspath(path))
        return path
